"""
Cabeça de predição com atenção global: atenção espacial (entre pontos),
atenção por canal, soma dos dois ramos e classificador FC por ponto.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

import tensor_core as tc
from errors import DegenerateInputError, DimensionError
from tensor_core import Linear, Tensor

logger = logging.getLogger(__name__)


@dataclass
class AttentionParams:
    classifier: Linear
    fc_a: Optional[Linear] = None
    fc_b: Optional[Linear] = None
    fc_d: Optional[Linear] = None

    @property
    def uses_attention(self) -> bool:
        return self.fc_a is not None

    def named(self, prefix: str = "head") -> Dict[str, Tensor]:
        out = {}
        for name in ("fc_a", "fc_b", "fc_d", "classifier"):
            layer = getattr(self, name)
            if layer is None:
                continue
            out[f"{prefix}.{name}.w"] = layer.w
            out[f"{prefix}.{name}.b"] = layer.b
        return out


def init_attention_params(rng: np.random.Generator, c_d: int, num_classes: int,
                          use_attention: bool = True) -> AttentionParams:
    if use_attention:
        fc_a = tc.glorot_linear(rng, c_d, c_d)
        fc_b = tc.glorot_linear(rng, c_d, c_d)
        fc_d = tc.glorot_linear(rng, c_d, c_d)
    else:
        fc_a = fc_b = fc_d = None
    return AttentionParams(classifier=tc.glorot_linear(rng, c_d, num_classes),
                           fc_a=fc_a, fc_b=fc_b, fc_d=fc_d)


def _check_points(F: Tensor):
    if F.data.ndim != 2:
        raise DimensionError(f"atenção exige N_d×C_d, recebeu {F.shape}")
    if F.shape[0] == 0:
        raise DegenerateInputError("atenção sem pontos")


def spatial_attention(F, params: AttentionParams, return_weights: bool = False):
    """
    v_ij = softmax_j(A_i·B_j), F̂_i = Σ_j v_ij D_j + F_i.
    Os pontos são processados numa ordem canônica e devolvidos na ordem de entrada.
    """
    F = tc.as_tensor(F)
    _check_points(F)
    order = tc.canonical_row_order(F.data)
    Fs = tc.permute_rows(F, order)
    A, B, D = params.fc_a(Fs), params.fc_b(Fs), params.fc_d(Fs)
    v = tc.softmax_rows(tc.matmul(A, tc.transpose_last(B)))
    out = tc.add(tc.matmul(v, D), Fs)
    restore = tc.inverse_order(order)
    out = tc.permute_rows(out, restore)
    if return_weights:
        return out, v.data[np.ix_(restore, restore)]
    return out


def channel_attention(F, return_weights: bool = False):
    """
    E = FᵀF, M[:, q] = softmax sobre p de E[:, q], F̃ = F·M + F. Sem projeções aprendidas.
    """
    F = tc.as_tensor(F)
    _check_points(F)
    order = tc.canonical_row_order(F.data)
    Fs = tc.permute_rows(F, order)
    energy = tc.matmul(tc.transpose_last(Fs), Fs)
    # softmax por coluna: transpõe, normaliza as linhas e volta
    M = tc.transpose_last(tc.softmax_rows(tc.transpose_last(energy)))
    out = tc.add(tc.matmul(Fs, M), Fs)
    out = tc.permute_rows(out, tc.inverse_order(order))
    if return_weights:
        return out, M.data
    return out


def classify(F, params: AttentionParams) -> Tensor:
    """logits = fc(F̂ + F̃); sem o módulo de atenção, logits = fc(F)"""
    F = tc.as_tensor(F)
    _check_points(F)
    if F.shape[1] != params.classifier.w.shape[0]:
        raise DimensionError(f"classificador espera {params.classifier.w.shape[0]} canais, recebeu {F.shape[1]}")
    if not params.uses_attention:
        return params.classifier(F)
    fused = tc.add(spatial_attention(F, params), channel_attention(F))
    return params.classifier(fused)


def predict_labels(logits) -> np.ndarray:
    """argmax por linha; empates vão para a menor classe"""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)
