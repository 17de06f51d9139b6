import logging
import os

from dotenv import load_dotenv

from errors import ConfigError

# Carregar variáveis de ambiente
load_dotenv()

# Configurações padrão
ELGS_SEED = os.getenv("ELGS_SEED")
ELGS_PRECISION = os.getenv("ELGS_PRECISION", "float64")
ELGS_LOG_LEVEL = os.getenv("ELGS_LOG_LEVEL", "INFO")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_default_seed() -> int:
    """
    Retorna a semente padrão.
    Usa ELGS_SEED quando definida, caso contrário 0.
    """
    raw = os.getenv("ELGS_SEED", ELGS_SEED)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"Erro ao ler ELGS_SEED: valor não inteiro '{raw}'")


def get_precision() -> str:
    """Precisão numérica padrão (float64 para testes, float32 permitido no treino)"""
    precision = os.getenv("ELGS_PRECISION", ELGS_PRECISION)
    if precision not in ("float64", "float32"):
        raise ConfigError(f"Erro ao ler ELGS_PRECISION: '{precision}' não suportada")
    return precision


def configure_logging(level: str = None):
    """Configura o logging do processo (stderr)"""
    level_name = (level or os.getenv("ELGS_LOG_LEVEL", ELGS_LOG_LEVEL)).upper()
    numeric = logging.getLevelName(level_name)
    if not isinstance(numeric, int):
        raise ConfigError(f"Erro ao configurar logging: nível '{level_name}' desconhecido")
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
