"""
Enriquecimento contextual das features de cada ponto com as de seus k vizinhos
mais próximos, fundidos por portas (gated) ou por concatenação simples.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

import tensor_core as tc
from errors import ConfigError, DimensionError
from sampling_grouping import NeighborList
from tensor_core import Linear, Tensor

logger = logging.getLogger(__name__)

CONTEXT_MODES = ("gated", "concat", "none")


@dataclass
class EnrichmentParams:
    lift: Linear    # C_f -> kC_f, leva P ao espaço de R
    gate_r: Linear  # kC_f -> kC_f, porta de P̃ calculada a partir de R
    gate_p: Linear  # kC_f -> kC_f, porta de R calculada a partir de P̃

    def named(self, prefix: str = "enrichment") -> Dict[str, Tensor]:
        out = {}
        for field in ("lift", "gate_r", "gate_p"):
            layer = getattr(self, field)
            out[f"{prefix}.{field}.w"] = layer.w
            out[f"{prefix}.{field}.b"] = layer.b
        return out

    @property
    def context_width(self) -> int:
        return self.lift.w.shape[1]


def init_enrichment_params(rng: np.random.Generator, k: int, c_f: int) -> EnrichmentParams:
    width = k * c_f
    return EnrichmentParams(
        lift=tc.glorot_linear(rng, c_f, width),
        gate_r=tc.glorot_linear(rng, width, width),
        gate_p=tc.glorot_linear(rng, width, width),
    )


def enriched_width(c_f: int, k: int, mode: str) -> int:
    """Largura das features após o enriquecimento em cada modo"""
    if mode == "gated":
        return 2 * k * c_f
    if mode == "concat":
        return c_f + k * c_f
    if mode == "none":
        return c_f
    raise ConfigError(f"modo de contexto desconhecido: {mode}")


def contextual_representation(features, neighbors: NeighborList) -> Tensor:
    """
    R[i] = concatenação das features dos k vizinhos de i, do mais próximo ao mais distante.
    """
    features = tc.as_tensor(features)
    if features.data.ndim != 2:
        raise DimensionError(f"features devem ser n×C_f, recebeu {features.shape}")
    n, c_f = features.shape
    if neighbors.indices.shape[0] != n:
        raise DimensionError(f"lista de vizinhos com {neighbors.indices.shape[0]} linhas para {n} pontos")
    if neighbors.indices.size and (neighbors.indices.min() < 0 or neighbors.indices.max() >= n):
        raise DimensionError("índice de vizinho fora da nuvem")
    grouped = tc.gather_rows(features, neighbors.indices)
    return tc.reshape(grouped, (n, neighbors.k * c_f))


def gated_fusion(own: Tensor, context: Tensor, gate_own: Linear, gate_context: Linear) -> Tensor:
    """
    Fusão com portas cruzadas: own é modulado por σ(W·context + b) e context por
    σ(W'·own + b'). Saída = [own gated ∥ context gated].
    """
    if own.shape != context.shape:
        raise DimensionError(f"fusão com formas diferentes: {own.shape} e {context.shape}")
    g = tc.sigmoid(gate_own(context))
    own_hat = tc.elementwise_mul(g, own)
    g_ctx = tc.sigmoid(gate_context(own))
    context_hat = tc.elementwise_mul(g_ctx, context)
    return tc.concat_cols([own_hat, context_hat])


def gated_fuse(P, R: Tensor, params: EnrichmentParams) -> Tensor:
    """[σ(w_i·R + b_i) ⊙ P̃ ∥ σ(w_i^R·P̃ + b_i^R) ⊙ R], com P̃ = fc(P; w_self)"""
    P, R = tc.as_tensor(P), tc.as_tensor(R)
    if P.shape[-1] != params.lift.w.shape[0]:
        raise DimensionError(f"P com {P.shape[-1]} canais, esperado {params.lift.w.shape[0]}")
    if R.shape != (P.shape[0], params.context_width):
        raise DimensionError(f"R com forma {R.shape}, esperado ({P.shape[0]}, {params.context_width})")
    p_tilde = params.lift(P)
    return gated_fusion(p_tilde, R, params.gate_r, params.gate_p)


def concat_fuse(P, R) -> Tensor:
    P, R = tc.as_tensor(P), tc.as_tensor(R)
    if P.shape[0] != R.shape[0]:
        raise DimensionError(f"concatenação com {P.shape[0]} e {R.shape[0]} linhas")
    return tc.concat_cols([P, R])


def enrich(features, neighbors: Optional[NeighborList], mode: str,
           params: Optional[EnrichmentParams] = None) -> Tensor:
    """Aplica o enriquecimento conforme o modo ('gated', 'concat' ou 'none')"""
    features = tc.as_tensor(features)
    if mode == "none":
        return features
    if mode not in CONTEXT_MODES:
        raise ConfigError(f"modo de contexto desconhecido: {mode}")
    if neighbors is None:
        raise ConfigError(f"modo '{mode}' exige lista de vizinhos")
    R = contextual_representation(features, neighbors)
    if mode == "concat":
        return concat_fuse(features, R)
    if params is None:
        raise ConfigError("modo 'gated' exige parâmetros de enriquecimento")
    return gated_fuse(features, R, params)
