"""
Rede completa: enriquecimento contextual, codificador hierárquico
(FPS + agrupamento por bola + GPM/MLP), decodificador com conexões laterais
e cabeça de atenção. Inclui configuração, parâmetros e checkpoints.
"""

import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

import tensor_core as tc
from attention_head import AttentionParams, classify, init_attention_params
from enrichment import CONTEXT_MODES, EnrichmentParams, enrich, enriched_width, init_enrichment_params
from errors import ConfigError, ContractError, FormatError
from gpm import GpmParams, gpm_forward, init_gpm_params
from sampling_grouping import (NeighborList, ball_group, farthest_point_sample, interpolate_features,
                               interpolation_weights, knn)
from tensor_core import Linear, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ELGS"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    block_samples: int = 4096
    in_channels: int = 3
    num_classes: int = 13
    k: int = 3
    enrich_radius: float = 0.06
    layer_scales: List[int] = field(default_factory=lambda: [1024, 256, 64, 16])
    layer_radii: List[float] = field(default_factory=lambda: [0.1, 0.2, 0.4, 0.8])
    group_sizes: List[int] = field(default_factory=lambda: [32, 32, 32, 32])
    channel_widths: List[int] = field(default_factory=lambda: [64, 128, 256, 512])
    gpm_enabled: List[bool] = field(default_factory=lambda: [True, True, False, False])
    gpm_stack_depth: int = 2
    mlp_layers: int = 2
    # do nível mais grosso para o mais fino; o último é C_d
    decoder_widths: List[int] = field(default_factory=lambda: [256, 256, 128, 128])
    context_mode: str = "gated"
    use_attention: bool = True

    @property
    def num_layers(self) -> int:
        return len(self.layer_scales)

    @property
    def feature_width(self) -> int:
        return self.decoder_widths[-1]

    @property
    def enriched_width(self) -> int:
        return enriched_width(self.in_channels, self.k, self.context_mode)

    def layer_out_width(self, layer: int) -> int:
        width = self.channel_widths[layer]
        return 2 * width if self.gpm_enabled[layer] else width

    def level_widths(self) -> List[int]:
        return [self.enriched_width] + [self.layer_out_width(l) for l in range(self.num_layers)]

    def validate(self) -> "NetworkConfig":
        L = self.num_layers
        if L < 1:
            raise ConfigError("a rede precisa de ao menos uma camada")
        per_layer = {"layer_radii": self.layer_radii, "group_sizes": self.group_sizes,
                     "channel_widths": self.channel_widths, "gpm_enabled": self.gpm_enabled,
                     "decoder_widths": self.decoder_widths}
        for name, values in per_layer.items():
            if len(values) != L:
                raise ConfigError(f"{name} tem {len(values)} entradas, esperado {L}")
        if any(b >= a for a, b in zip(self.layer_scales, self.layer_scales[1:])):
            raise ConfigError(f"escalas devem ser estritamente decrescentes: {self.layer_scales}")
        if self.layer_scales[0] > self.block_samples or self.layer_scales[-1] < 1:
            raise ConfigError(f"escalas {self.layer_scales} incompatíveis com {self.block_samples} amostras")
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigError(f"context_mode desconhecido: {self.context_mode}")
        if any(r <= 0 for r in self.layer_radii) or self.enrich_radius <= 0:
            raise ConfigError("raios devem ser positivos")
        positives = [self.k, self.in_channels, self.num_classes, self.mlp_layers, self.gpm_stack_depth]
        positives += list(self.group_sizes) + list(self.channel_widths) + list(self.decoder_widths)
        if any(int(v) < 1 for v in positives):
            raise ConfigError("larguras, tamanhos e contagens devem ser positivos")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"chave desconhecida em network: {unknown[0]}")
        return cls(**data).validate()


@dataclass
class ModelParams:
    encoder: List[GpmParams]
    decoder: List[Linear]
    head: AttentionParams
    enrichment: Optional[EnrichmentParams] = None

    def named(self) -> Dict[str, Tensor]:
        """Mapa ordenado nome -> tensor; a ordem é a do checkpoint"""
        out: Dict[str, Tensor] = {}
        if self.enrichment is not None:
            out.update(self.enrichment.named("enrichment"))
        for l, layer in enumerate(self.encoder):
            out.update(layer.named(f"encoder{l}"))
        for step, layer in enumerate(self.decoder):
            out[f"decoder{step}.w"] = layer.w
            out[f"decoder{step}.b"] = layer.b
        out.update(self.head.named("head"))
        return out

    def zero_grad(self):
        for tensor in self.named().values():
            tensor.zero_grad()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named().items()}


def init_params(config: NetworkConfig, seed: int = 0) -> ModelParams:
    """Parâmetros Glorot-uniforme (vieses zerados) criados numa ordem fixa a partir da semente"""
    config.validate()
    rng = np.random.default_rng(seed)
    enrichment = None
    if config.context_mode == "gated":
        enrichment = init_enrichment_params(rng, config.k, config.in_channels)

    widths = config.level_widths()
    encoder = []
    for l in range(config.num_layers):
        encoder.append(init_gpm_params(rng, widths[l] + 3, config.channel_widths[l],
                                       mlp_layers=config.mlp_layers, use_gab=config.gpm_enabled[l],
                                       stack_depth=config.gpm_stack_depth))

    decoder = []
    current = widths[-1]
    for step, l in enumerate(reversed(range(config.num_layers))):
        out_width = config.decoder_widths[step]
        decoder.append(tc.glorot_linear(rng, current + widths[l], out_width))
        current = out_width

    head = init_attention_params(rng, config.feature_width, config.num_classes, config.use_attention)
    params = ModelParams(encoder=encoder, decoder=decoder, head=head, enrichment=enrichment)
    for name, tensor in params.named().items():
        tensor.name = name
    return round_to_checkpoint(params)


def round_to_checkpoint(params: ModelParams) -> ModelParams:
    """
    Arredonda os parâmetros (in place) para a grade float32 do checkpoint, de modo que
    o modelo em memória e o modelo recarregado produzam exatamente as mesmas predições.
    """
    for tensor in params.named().values():
        tensor.data = tensor.data.astype("<f4").astype(tensor.data.dtype)
    return params


def parameter_count(params: ModelParams) -> int:
    return int(sum(t.data.size for t in params.named().values()))


# Geometria do bloco (independente dos parâmetros)

@dataclass
class LayerGeometry:
    centroids: np.ndarray  # índices no nível anterior
    members: np.ndarray    # s×g, índices no nível anterior
    rel_xyz: np.ndarray    # s×g×3, coordenadas relativas ao centróide
    xyz: np.ndarray        # s×3


@dataclass
class BlockGeometry:
    neighbors: Optional[NeighborList]
    layers: List[LayerGeometry]
    interpolation: List[Tuple[np.ndarray, np.ndarray]]  # nível l+1 -> nível l, indexado por l


@dataclass
class EncoderLevel:
    xyz: np.ndarray
    features: Tensor


def plan_geometry(xyz, config: NetworkConfig) -> BlockGeometry:
    """Pré-calcula kNN do enriquecimento, FPS, grupos e pesos de interpolação de um bloco"""
    xyz = np.asarray(xyz, dtype=np.float64)
    neighbors = None
    if config.context_mode != "none":
        neighbors = knn(xyz, xyz, config.k, config.enrich_radius)

    layers, current = [], xyz
    for l in range(config.num_layers):
        scale = config.layer_scales[l]
        if scale > current.shape[0]:
            raise ContractError(f"camada {l}: escala {scale} excede {current.shape[0]} pontos disponíveis")
        centroids = farthest_point_sample(current, scale)
        groups = ball_group(current, centroids, config.layer_radii[l], config.group_sizes[l])
        centre = current[centroids]
        rel_xyz = current[groups.members] - centre[:, None, :]
        layers.append(LayerGeometry(centroids, groups.members, rel_xyz, centre))
        current = centre

    level_xyz = [xyz] + [layer.xyz for layer in layers]
    interpolation = [interpolation_weights(level_xyz[l + 1], level_xyz[l]) for l in range(config.num_layers)]
    return BlockGeometry(neighbors=neighbors, layers=layers, interpolation=interpolation)


def encode(block_feats, block_xyz, config: NetworkConfig, params: ModelParams,
           geometry: Optional[BlockGeometry] = None) -> List[EncoderLevel]:
    """
    Retorna os níveis 0..L: o nível 0 é a entrada enriquecida, os demais são as
    saídas de cada camada, guardadas para as conexões laterais.
    """
    block_feats = tc.as_tensor(block_feats)
    block_xyz = np.asarray(block_xyz, dtype=np.float64)
    if block_feats.shape[0] != config.block_samples or block_xyz.shape[0] != config.block_samples:
        raise ContractError(
            f"bloco com {block_feats.shape[0]} pontos, configuração espera {config.block_samples}"
        )
    geometry = geometry or plan_geometry(block_xyz, config)
    levels = [EncoderLevel(block_xyz, block_feats)]
    for l, layer in enumerate(geometry.layers):
        grouped = tc.gather_rows(levels[-1].features, layer.members)
        grouped = tc.concat_cols([tc.as_tensor(layer.rel_xyz), grouped])
        levels.append(EncoderLevel(layer.xyz, gpm_forward(grouped, params.encoder[l])))
    return levels


def decode(levels: List[EncoderLevel], config: NetworkConfig, params: ModelParams,
           geometry: Optional[BlockGeometry] = None) -> Tensor:
    """Do nível mais grosso ao mais fino: interpolação, concatenação lateral e FC+ReLU"""
    L = config.num_layers
    if len(levels) != L + 1 or any(level is None or level.features is None for level in levels):
        raise ContractError(f"decodificador exige {L + 1} níveis, recebeu {len(levels)}")
    current = levels[-1].features
    for step, l in enumerate(reversed(range(L))):
        plan = geometry.interpolation[l] if geometry is not None else None
        up = interpolate_features(levels[l + 1].xyz, current, levels[l].xyz, plan=plan)
        current = tc.relu(params.decoder[step](tc.concat_cols([up, levels[l].features])))
    return current


def forward_network(features, xyz, config: NetworkConfig, params: ModelParams,
                    geometry: Optional[BlockGeometry] = None,
                    timings: Optional[Dict[str, float]] = None) -> Tensor:
    """
    Features do bloco (S×C_f) -> logits (S×num_classes); timings recebe ms por estágio.
    Sem geometria pré-calculada, a amostragem e o agrupamento entram como estágio "geometry".
    """
    clock = time.perf_counter()

    def lap(stage: str):
        nonlocal clock
        if timings is not None:
            now = time.perf_counter()
            timings[stage] = timings.get(stage, 0.0) + (now - clock) * 1000.0
            clock = now

    if geometry is None:
        geometry = plan_geometry(xyz, config)
        lap("geometry")
    enriched = enrich(features, geometry.neighbors, config.context_mode, params.enrichment)
    lap("enrichment")
    levels = encode(enriched, xyz, config, params, geometry)
    lap("encoder")
    per_point = decode(levels, config, params, geometry)
    lap("decoder")
    logits = classify(per_point, params.head)
    lap("head")
    return logits


# Checkpoint

def save_checkpoint(params: ModelParams, path) -> None:
    named = round_to_checkpoint(params).named()
    buffer = bytearray(CHECKPOINT_MAGIC)
    buffer += struct.pack("<HI", CHECKPOINT_VERSION, len(named))
    for name, tensor in named.items():
        encoded = name.encode("utf-8")
        shape = tensor.shape
        buffer += struct.pack("<H", len(encoded)) + encoded
        buffer += struct.pack(f"<B{len(shape)}I", len(shape), *shape)
        buffer += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(bytes(buffer))
    except OSError as e:
        raise FormatError(f"Erro ao salvar checkpoint: {str(e)}")
    logger.info("checkpoint salvo em %s (%d tensores)", path, len(named))


def load_checkpoint(path, config: NetworkConfig) -> ModelParams:
    """Lê um checkpoint e o encaixa na estrutura definida por config"""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"Erro ao ler checkpoint: {str(e)}")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("Erro ao ler checkpoint: magic inválido")

    params = init_params(config)
    named = params.named()
    try:
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"Erro ao ler checkpoint: versão {version} não suportada")
        offset, seen = 10, set()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape)
            offset += 4 * size
            if name not in named or named[name].shape != tuple(shape):
                raise FormatError(f"Erro ao ler checkpoint: tensor '{name}' {tuple(shape)} incompatível com a configuração")
            named[name].data = data.astype(tc.get_dtype())
            seen.add(name)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"Erro ao ler checkpoint: {str(e)}")
    missing = sorted(set(named) - seen)
    if missing or offset != len(raw):
        raise FormatError(f"Erro ao ler checkpoint: tensores ausentes {missing[:3]} ou bytes sobrando")
    return params
