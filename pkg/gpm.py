"""
Módulo de percepção de grupo: MLP compartilhado por membro, atenção entre os
membros de cada grupo (GAB), fusão com portas e max-pooling por grupo.
Com a atenção desligada reduz-se a MLP + max-pooling.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

import tensor_core as tc
from enrichment import gated_fusion
from errors import ContractError, DimensionError
from tensor_core import Linear, Tensor

logger = logging.getLogger(__name__)


@dataclass
class GpmUnit:
    mlp: List[Linear]
    gab_proj: Optional[Linear] = None
    gate_own: Optional[Linear] = None      # σ(W·G̃ + b) modula G
    gate_context: Optional[Linear] = None  # σ(W·G + b) modula G̃

    @property
    def uses_gab(self) -> bool:
        return self.gab_proj is not None


@dataclass
class GpmParams:
    units: List[GpmUnit] = field(default_factory=list)

    @property
    def uses_gab(self) -> bool:
        return bool(self.units) and self.units[0].uses_gab

    @property
    def out_width(self) -> int:
        last = self.units[-1]
        width = last.mlp[-1].w.shape[1]
        return 2 * width if last.uses_gab else width

    def named(self, prefix: str = "gpm") -> Dict[str, Tensor]:
        out = {}
        for u, unit in enumerate(self.units):
            layers = [(f"mlp.{i}", layer) for i, layer in enumerate(unit.mlp)]
            layers += [(name, getattr(unit, name)) for name in ("gab_proj", "gate_own", "gate_context")]
            for name, layer in layers:
                if layer is None:
                    continue
                out[f"{prefix}.unit{u}.{name}.w"] = layer.w
                out[f"{prefix}.unit{u}.{name}.b"] = layer.b
        return out


def init_gpm_params(rng: np.random.Generator, c_in: int, c_e: int, mlp_layers: int = 2,
                    use_gab: bool = True, stack_depth: int = 2) -> GpmParams:
    """
    Cria as unidades do módulo. Sem GAB há uma única unidade MLP (largura C_e);
    com GAB há stack_depth unidades, cada uma consumindo a concatenação 2C_e da anterior.
    """
    if mlp_layers < 1 or c_e < 1 or c_in < 1:
        raise ContractError(f"GPM inválido: c_in={c_in}, c_e={c_e}, camadas={mlp_layers}")
    depth = stack_depth if use_gab else 1
    if depth < 1:
        raise ContractError(f"profundidade de empilhamento inválida: {stack_depth}")
    units = []
    width_in = c_in
    for _ in range(depth):
        mlp = []
        for i in range(mlp_layers):
            mlp.append(tc.glorot_linear(rng, width_in if i == 0 else c_e, c_e))
        unit = GpmUnit(mlp=mlp)
        if use_gab:
            unit.gab_proj = tc.glorot_linear(rng, c_e, c_e)
            unit.gate_own = tc.glorot_linear(rng, c_e, c_e)
            unit.gate_context = tc.glorot_linear(rng, c_e, c_e)
        units.append(unit)
        width_in = 2 * c_e
    return GpmParams(units=units)


def shared_mlp(x: Tensor, layers: List[Linear]) -> Tensor:
    for layer in layers:
        x = tc.relu(layer(x))
    return x


def gab_forward(G: Tensor, proj: Linear, return_weights: bool = False):
    """
    Atenção entre membros: Ĝ = fc(G), α = Ĝ·Ĝᵀ, β = softmax(LeakyReLU(α)), G̃ = β·Ĝ.
    G pode ser g×C_e ou (grupos)×g×C_e.
    """
    if G.data.ndim not in (2, 3):
        raise DimensionError(f"GAB exige g×C ou grupos×g×C, recebeu {G.shape}")
    g_hat = proj(G)
    alpha = tc.matmul(g_hat, tc.transpose_last(g_hat))
    beta = tc.softmax_rows(tc.leaky_relu(alpha))
    g_tilde = tc.matmul(beta, g_hat)
    if return_weights:
        return g_tilde, beta
    return g_tilde


def gpm_forward(group_feats: Tensor, params: GpmParams) -> Tensor:
    """
    Features agrupadas (grupos×g×c_in) -> features por grupo (grupos×largura).
    Os membros são colocados numa ordem canônica antes do processamento, de modo que a
    saída não depende da ordem em que chegam.
    """
    group_feats = tc.as_tensor(group_feats)
    if group_feats.data.ndim != 3 or group_feats.shape[1] == 0:
        raise DimensionError(f"gpm_forward exige grupos×g×c com g >= 1, recebeu {group_feats.shape}")
    expected = params.units[0].mlp[0].w.shape[0]
    if group_feats.shape[2] != expected:
        raise DimensionError(f"gpm_forward: {group_feats.shape[2]} canais, esperado {expected}")

    x = tc.permute_rows(group_feats, tc.canonical_row_order(group_feats.data))
    for unit in params.units:
        G = shared_mlp(x, unit.mlp)
        if not unit.uses_gab:
            x = G
            continue
        g_tilde = gab_forward(G, unit.gab_proj)
        x = gated_fusion(G, g_tilde, unit.gate_own, unit.gate_context)
    return tc.max_over_rows(x)
