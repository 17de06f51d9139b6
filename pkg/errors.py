class ElgsError(Exception):
    """Erro base do projeto"""


class DimensionError(ElgsError):
    """Formas de tensores incompatíveis"""


class ContractError(ElgsError):
    """Pré-condição de uma operação violada"""


class ParseError(ElgsError):
    """Linha malformada em arquivo de nuvem de pontos"""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"linha {line_number}: {message}")
        self.line_number = line_number


class FormatError(ElgsError):
    """Arquivo com estrutura inconsistente (colunas, magic, versão)"""


class DegenerateInputError(ElgsError):
    """Entrada vazia ou degenerada"""


class ConfigError(ElgsError):
    """Configuração inválida ou chave desconhecida"""


class NonFiniteError(ElgsError):
    """NaN ou Inf encontrado durante o treino"""
