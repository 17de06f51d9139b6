"""
Primitivas espaciais: kNN com raio máximo, amostragem do ponto mais distante,
agrupamento por bola e interpolação por inverso da distância.
"""

import logging
from dataclasses import dataclass
from itertools import product
from typing import Dict, Optional, Tuple

import numpy as np

import tensor_core as tc
from errors import ContractError

logger = logging.getLogger(__name__)

EXHAUSTIVE_BELOW = 64
INTERP_NEIGHBORS = 3
INTERP_EPS = 1e-8
# limite de elementos por bloco de consulta na busca exaustiva
_CHUNK_ELEMENTS = 1 << 22

_OFFSETS = tuple(product((-1, 0, 1), repeat=3))


@dataclass
class NeighborList:
    """k vizinhos por consulta, em ordem crescente de distância"""
    indices: np.ndarray
    sq_dists: np.ndarray
    counts: np.ndarray  # vizinhos dentro do raio antes do preenchimento

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class GroupingResult:
    centroids: np.ndarray
    members: np.ndarray
    counts: np.ndarray

    @property
    def group_size(self) -> int:
        return self.members.shape[1]


def _as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def squared_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    return ((points - query) ** 2).sum(axis=1)


def _pairwise_chunks(points: np.ndarray, queries: np.ndarray):
    """Gera (início, matriz m×n de distâncias ao quadrado) por blocos de consultas"""
    step = max(1, _CHUNK_ELEMENTS // max(1, 3 * points.shape[0]))
    for start in range(0, queries.shape[0], step):
        q = queries[start:start + step]
        yield start, ((points[None, :, :] - q[:, None, :]) ** 2).sum(axis=-1)


class VoxelGrid:
    """Hash espacial uniforme com células do tamanho do raio de busca"""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = points
        self.cell = cell
        keys = np.floor(points / cell).astype(np.int64)
        unique, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(unique.shape[0] + 1))
        self.buckets: Dict[Tuple[int, int, int], np.ndarray] = {
            tuple(int(v) for v in key): order[bounds[i]:bounds[i + 1]]
            for i, key in enumerate(unique)
        }

    def candidates(self, query: np.ndarray) -> np.ndarray:
        """Índices (crescentes) das 27 células ao redor da consulta"""
        base = np.floor(query / self.cell).astype(np.int64)
        parts = []
        for dx, dy, dz in _OFFSETS:
            bucket = self.buckets.get((int(base[0]) + dx, int(base[1]) + dy, int(base[2]) + dz))
            if bucket is not None:
                parts.append(bucket)
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))


def _select(cand: np.ndarray, d2: np.ndarray, r2: float, k: int):
    """Os k mais próximos dentro do raio; empates pelo menor índice (cand crescente)"""
    keep = d2 <= r2
    cand, d2 = cand[keep], d2[keep]
    order = np.argsort(d2, kind="stable")[:k]
    return cand[order], d2[order]


def knn(points, queries, k: int, max_radius: float = np.inf) -> NeighborList:
    """
    k vizinhos mais próximos de cada consulta, descartando os que estão além de max_radius.
    Listas incompletas são preenchidas repetindo o vizinho mais próximo; sem nenhum
    vizinho no raio, usa-se o ponto mais próximo sem limite de raio.
    """
    points, queries = _as_points(points), _as_points(queries)
    n, m = points.shape[0], queries.shape[0]
    if k < 1 or n < 1:
        raise ContractError(f"knn exige k >= 1 e n >= 1 (k={k}, n={n})")
    r2 = max_radius * max_radius

    indices = np.empty((m, k), dtype=np.int64)
    sq_dists = np.empty((m, k), dtype=np.float64)
    counts = np.empty(m, dtype=np.int64)
    everything = np.arange(n)

    def fill(row, sel, dist, query):
        counts[row] = sel.shape[0]
        if sel.shape[0] == 0:
            full = squared_distances(points, query)
            nearest = int(np.argmin(full))
            sel, dist = np.array([nearest]), np.array([full[nearest]])
        pad = k - sel.shape[0]
        indices[row] = np.concatenate([sel, np.repeat(sel[:1], pad)])
        sq_dists[row] = np.concatenate([dist, np.repeat(dist[:1], pad)])

    if n < EXHAUSTIVE_BELOW or not np.isfinite(max_radius) or max_radius <= 0:
        for start, d2 in _pairwise_chunks(points, queries):
            for offset in range(d2.shape[0]):
                row = start + offset
                sel, dist = _select(everything, d2[offset], r2, k)
                fill(row, sel, dist, queries[row])
    else:
        grid = VoxelGrid(points, max_radius)
        for row in range(m):
            cand = grid.candidates(queries[row])
            sel, dist = _select(cand, squared_distances(points[cand], queries[row]), r2, k)
            fill(row, sel, dist, queries[row])
    return NeighborList(indices=indices, sq_dists=sq_dists, counts=counts)


def farthest_point_sample(points, count: int, seed: int = 0, random_start: bool = False) -> np.ndarray:
    """Seleção gulosa do ponto mais distante; início no índice 0 (ou sorteado)"""
    points = _as_points(points)
    n = points.shape[0]
    if count > n:
        raise ContractError(f"amostragem de {count} pontos em nuvem com {n}")
    if count <= 0:
        return np.empty(0, dtype=np.int64)

    start = int(np.random.default_rng(seed).integers(n)) if random_start else 0
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    min_d2 = squared_distances(points, points[start])
    min_d2[start] = -1.0
    for i in range(1, count):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        min_d2 = np.minimum(min_d2, squared_distances(points, points[nxt]))
        min_d2[nxt] = -1.0
    return chosen


def ball_group(points, centroids: np.ndarray, radius: float, group_size: int) -> GroupingResult:
    """
    Até group_size membros dentro do raio de cada centróide, em ordem crescente de índice;
    o restante é preenchido com o próprio centróide.
    """
    if radius <= 0:
        raise ContractError(f"raio do agrupamento deve ser positivo: {radius}")
    if group_size < 1:
        raise ContractError(f"tamanho de grupo inválido: {group_size}")
    points = _as_points(points)
    centroids = np.asarray(centroids, dtype=np.int64).reshape(-1)
    r2 = radius * radius

    members = np.empty((centroids.shape[0], group_size), dtype=np.int64)
    counts = np.empty(centroids.shape[0], dtype=np.int64)
    for start, d2 in _pairwise_chunks(points, points[centroids]):
        for offset in range(d2.shape[0]):
            row = start + offset
            inside = np.flatnonzero(d2[offset] <= r2)[:group_size]
            counts[row] = inside.shape[0]
            members[row, :inside.shape[0]] = inside
            members[row, inside.shape[0]:] = centroids[row]
    return GroupingResult(centroids=centroids, members=members, counts=counts)


def interpolation_weights(coarse_xyz, fine_xyz):
    """Índices dos 3 centróides mais próximos e pesos 1/(d²+ε) normalizados"""
    coarse_xyz = _as_points(coarse_xyz)
    if coarse_xyz.shape[0] < 1:
        raise ContractError("interpolação sem pontos grossos")
    k = min(INTERP_NEIGHBORS, coarse_xyz.shape[0])
    neighbors = knn(coarse_xyz, fine_xyz, k)
    weights = 1.0 / (neighbors.sq_dists + INTERP_EPS)
    weights /= weights.sum(axis=1, keepdims=True)
    return neighbors.indices, weights


def interpolate_features(coarse_xyz, coarse_feat, fine_xyz, plan: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """
    Média ponderada pelo inverso do quadrado da distância das features dos 3 vizinhos
    grossos mais próximos. Aceita Tensor (registrado no grafo) ou array.
    """
    index, weights = plan if plan is not None else interpolation_weights(coarse_xyz, fine_xyz)
    if isinstance(coarse_feat, tc.Tensor):
        return tc.weighted_gather(coarse_feat, index, weights)
    coarse_feat = np.asarray(coarse_feat, dtype=np.float64)
    return np.einsum("mk,mkc->mc", weights, coarse_feat[index])
