"""
Perda, otimizadores, métricas (OA, IoU por classe, mIoU), laço de treino
determinístico e os experimentos de ablação e robustez.
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

import tensor_core as tc
from attention_head import predict_labels
from backbone import (BlockGeometry, ModelParams, NetworkConfig, forward_network, init_params, plan_geometry,
                      round_to_checkpoint)
from config import get_default_seed, get_precision
from errors import ConfigError, ContractError, DegenerateInputError, NonFiniteError
from pointcloud_io import (PointCloud, block_inputs, generate_synthetic_scene, partition_blocks,
                           perturb_rotate_z, perturb_scale)
from sampling_grouping import knn
from tensor_core import Tensor

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "full": {},
    "no_cr": {"disable_cr": True},
    "no_gpm": {"disable_gpm": True},
    "no_am": {"disable_attention": True},
    "concat_cr": {"concat_cr": True},
}

# Resultados de referência em S3DIS (área 5), apenas documentação; não são reproduzidos em escala de mesa
REFERENCE_TARGETS = {
    "full": {"oa": 88.43, "miou": 60.06},
    "no_cr": {"oa": 87.91, "miou": 56.15},
    "no_gpm": {"oa": 87.74, "miou": 57.84},
    "no_am": {"oa": 87.90, "miou": 58.67},
    "concat_cr": {"oa": 88.21, "miou": 59.14},
}
REFERENCE_ROBUSTNESS = {"scale_0.5_oa_drop": 3.0, "rotation_pi_10_oa_drop": 1.7}


# Métricas

@dataclass
class MetricsReport:
    """Matriz de confusão (linhas = verdade) e métricas derivadas"""
    confusion: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def oa(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def per_class_iou(self) -> List[Optional[float]]:
        tp = np.diag(self.confusion).astype(np.float64)
        union = self.confusion.sum(axis=0) + self.confusion.sum(axis=1) - tp
        return [float(tp[c] / union[c]) if union[c] > 0 else None for c in range(self.num_classes)]

    @property
    def miou(self) -> float:
        present = [iou for iou in self.per_class_iou if iou is not None]
        return float(np.mean(present)) if present else 0.0

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        if other.confusion.shape != self.confusion.shape:
            raise ContractError("relatórios com números de classes diferentes")
        return MetricsReport(self.confusion + other.confusion)

    def to_dict(self, class_names: Optional[Sequence[str]] = None) -> dict:
        data = {
            "points": self.total,
            "oa": self.oa,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "confusion": self.confusion.tolist(),
        }
        if class_names is not None:
            data["class_names"] = list(class_names[: self.num_classes])
        return data


def evaluate(pred_labels, true_labels, num_classes: int) -> MetricsReport:
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ContractError(f"predições ({pred.shape[0]}) e rótulos ({true.shape[0]}) com tamanhos diferentes")
    if pred.size == 0:
        raise DegenerateInputError("avaliação sem pontos")
    for name, labels in (("predito", pred), ("verdadeiro", true)):
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ContractError(f"rótulo {name} fora do intervalo [0, {num_classes})")
    counts = np.bincount(num_classes * true + pred, minlength=num_classes * num_classes)
    return MetricsReport(counts.reshape(num_classes, num_classes))


def cross_entropy_loss(logits: Tensor, labels, num_classes: Optional[int] = None) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    classes = num_classes or logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"rótulo fora do intervalo [0, {classes})")
    return tc.softmax_cross_entropy(logits, labels)


# Configuração de treino

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: Optional[int] = None
    precision: Optional[str] = None
    cube_size: float = 1.0
    partition: str = "xy"
    disable_cr: bool = False
    concat_cr: bool = False
    disable_gpm: bool = False
    disable_attention: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"épocas e lote devem ser >= 1 (epochs={self.epochs}, batch_size={self.batch_size})")
        if self.learning_rate < 0:
            raise ConfigError(f"taxa de aprendizado negativa: {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"otimizador desconhecido: {self.optimizer}")
        if self.precision is not None and self.precision not in ("float64", "float32"):
            raise ConfigError(f"precisão desconhecida: {self.precision}")
        if self.partition not in ("xy", "xyz") or self.cube_size <= 0:
            raise ConfigError(f"particionamento inválido: {self.partition}, cubo {self.cube_size}")
        if self.disable_cr and self.concat_cr:
            raise ConfigError("disable_cr e concat_cr não podem ser combinados")
        return self

    def resolved_seed(self) -> int:
        return get_default_seed() if self.seed is None else int(self.seed)

    def resolved_precision(self) -> str:
        return get_precision() if self.precision is None else self.precision

    def apply_ablation(self, net: NetworkConfig) -> NetworkConfig:
        """Configuração da rede com as ablações desta execução aplicadas"""
        changes = {}
        if self.disable_cr:
            changes["context_mode"] = "none"
        elif self.concat_cr:
            changes["context_mode"] = "concat"
        if self.disable_gpm:
            changes["gpm_enabled"] = [False] * net.num_layers
        if self.disable_attention:
            changes["use_attention"] = False
        return replace(net, **changes).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"chave desconhecida em train: {unknown[0]}")
        return cls(**data).validate()


# Conjunto de blocos

@dataclass
class BlockSample:
    features: np.ndarray
    xyz: np.ndarray
    labels: Optional[np.ndarray]
    indices: Optional[np.ndarray] = None
    _geometry: Dict[tuple, BlockGeometry] = field(default_factory=dict, repr=False)

    def geometry(self, net: NetworkConfig) -> BlockGeometry:
        key = (net.block_samples, net.k, net.enrich_radius, net.context_mode != "none",
               tuple(net.layer_scales), tuple(net.layer_radii), tuple(net.group_sizes))
        if key not in self._geometry:
            self._geometry[key] = plan_geometry(self.xyz, net)
        return self._geometry[key]


def build_dataset(cloud: PointCloud, net: NetworkConfig, cube_size: float = 1.0,
                  partition: str = "xy", seed: int = 0) -> List[BlockSample]:
    if cloud.num_features != net.in_channels:
        raise ConfigError(f"nuvem com {cloud.num_features} canais, rede espera {net.in_channels}")
    blocks = partition_blocks(cloud, cube_size, net.block_samples, seed, partition)
    samples = []
    for block in blocks:
        features, xyz, labels = block_inputs(cloud, block)
        samples.append(BlockSample(features, xyz, labels, block.indices))
    return samples


# Otimizadores

def _check_grads(params: Dict[str, Tensor], grads: Dict[str, np.ndarray]):
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ContractError(f"gradiente ausente para '{missing[0]}'")


def sgd_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], config: TrainConfig):
    _check_grads(params, grads)
    for name, tensor in params.items():
        tensor.data = (tensor.data - config.learning_rate * grads[name]).astype(tensor.data.dtype)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], config: TrainConfig,
              state: AdamState, betas=(0.9, 0.999), eps: float = 1e-8):
    _check_grads(params, grads)
    beta1, beta2 = betas
    state.step += 1
    for name, tensor in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1 ** state.step)
        v_hat = v / (1.0 - beta2 ** state.step)
        update = config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        tensor.data = (tensor.data - update).astype(tensor.data.dtype)


# Treino

@dataclass
class TrainResult:
    params: ModelParams
    net_config: NetworkConfig
    history: List[dict]
    order_digest: str
    final_report: MetricsReport


def loss_trend_flags(losses: Sequence[float], window: int = 10) -> List[int]:
    """Épocas (1-indexadas) em que a média móvel da perda aumentou"""
    if len(losses) <= window:
        return []
    averages = np.convolve(np.asarray(losses, dtype=np.float64), np.ones(window) / window, mode="valid")
    return [int(i + window + 1) for i in np.flatnonzero(np.diff(averages) > 0)]


def predict_block(params: ModelParams, net: NetworkConfig, sample: BlockSample) -> np.ndarray:
    with tc.no_grad():
        logits = forward_network(sample.features, sample.xyz, net, params, sample.geometry(net))
    return logits.data


def train(dataset: List[BlockSample], net_config: NetworkConfig, train_config: TrainConfig,
          log_path=None, progress: bool = False) -> TrainResult:
    """
    Treino determinístico: inicialização, embaralhamento e amostragem dependem só da semente.
    Cada época gera um registro {epoch, loss, oa, miou, per_class_iou, wall_ms}.
    """
    train_config.validate()
    if not dataset:
        raise ContractError("conjunto de treino vazio")
    if any(sample.labels is None for sample in dataset):
        raise ContractError("conjunto de treino com blocos sem rótulos")
    tc.set_precision(train_config.resolved_precision())
    net = train_config.apply_ablation(net_config)
    seed = train_config.resolved_seed()

    params = init_params(net, seed)
    named = params.named()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    state = AdamState()
    digest = hashlib.sha256()
    history: List[dict] = []
    report = None

    log_handle = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        epochs = tqdm(range(1, train_config.epochs + 1), desc="treino", disable=not progress)
        for epoch in epochs:
            started = time.perf_counter()
            order = shuffle_rng.permutation(len(dataset))
            epoch_losses, report = [], None
            for start in range(0, len(order), train_config.batch_size):
                batch = order[start:start + train_config.batch_size]
                digest.update(np.asarray(batch, dtype="<i8").tobytes())
                params.zero_grad()
                for index in batch:
                    sample = dataset[index]
                    with tc.Graph() as graph:
                        logits = forward_network(sample.features, sample.xyz, net, params, sample.geometry(net))
                        loss = cross_entropy_loss(logits, sample.labels, net.num_classes)
                        if not np.isfinite(loss.data):
                            culprit = tc.find_non_finite(graph) or "perda"
                            raise NonFiniteError(f"perda não finita na época {epoch}: {culprit}")
                        graph.backward(loss)
                    epoch_losses.append(float(loss.data))
                    block_report = evaluate(predict_labels(logits), sample.labels, net.num_classes)
                    report = block_report if report is None else report.merge(block_report)

                scale = 1.0 / len(batch)
                grads = {name: (t.grad * scale if t.grad is not None else None) for name, t in named.items()}
                if train_config.optimizer == "adam":
                    adam_step(named, grads, train_config, state)
                else:
                    sgd_step(named, grads, train_config)
                for name, tensor in named.items():
                    if not np.all(np.isfinite(tensor.data)):
                        raise NonFiniteError(f"parâmetro '{name}' não finito após a época {epoch}")

            record = {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)),
                "oa": report.oa,
                "miou": report.miou,
                "per_class_iou": report.per_class_iou,
                "wall_ms": (time.perf_counter() - started) * 1000.0,
            }
            history.append(record)
            if log_handle is not None:
                log_handle.write(json.dumps(record) + "\n")
            logger.debug("época %d: perda %.6f, OA %.4f, mIoU %.4f", epoch, record["loss"], record["oa"], record["miou"])
    finally:
        if log_handle is not None:
            log_handle.close()

    round_to_checkpoint(params)
    flagged = loss_trend_flags([r["loss"] for r in history])
    if flagged:
        logger.warning("média móvel da perda subiu nas épocas %s", flagged[:10])
    logger.info("Treino concluído: %d épocas, OA %.4f, mIoU %.4f", train_config.epochs, report.oa, report.miou)
    return TrainResult(params, net, history, digest.hexdigest(), report)


# Predição e avaliação de nuvens inteiras

def predict_cloud(params: ModelParams, net: NetworkConfig, cloud: PointCloud,
                  cube_size: float = 1.0, partition: str = "xy", seed: int = 0) -> np.ndarray:
    """
    Rótulo por ponto da nuvem: probabilidades somadas sobre os blocos que amostraram
    o ponto; pontos não amostrados herdam o rótulo do ponto amostrado mais próximo.
    """
    samples = build_dataset(cloud, net, cube_size, partition, seed)
    votes = np.zeros((cloud.n, net.num_classes))
    for sample in samples:
        logits = predict_block(params, net, sample)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        np.add.at(votes, sample.indices, shifted / shifted.sum(axis=1, keepdims=True))

    seen = votes.sum(axis=1) > 0
    labels = np.argmax(votes, axis=1)
    if not np.all(seen):
        seen_idx = np.flatnonzero(seen)
        unseen_idx = np.flatnonzero(~seen)
        nearest = knn(cloud.xyz[seen_idx], cloud.xyz[unseen_idx], 1)
        labels[unseen_idx] = labels[seen_idx[nearest.indices[:, 0]]]
    return labels


def evaluate_cloud(params: ModelParams, net: NetworkConfig, cloud: PointCloud,
                   train_config: TrainConfig) -> MetricsReport:
    cloud.check_labels(net.num_classes)
    pred = predict_cloud(params, net, cloud, train_config.cube_size, train_config.partition,
                         train_config.resolved_seed())
    return evaluate(pred, cloud.labels, net.num_classes)


@dataclass
class RobustnessReport:
    baseline_oa: float
    entries: List[dict]

    def to_dict(self) -> dict:
        return {"baseline_oa": self.baseline_oa, "entries": self.entries,
                "reference_drops": REFERENCE_ROBUSTNESS}


def run_robustness(params: ModelParams, net: NetworkConfig, cloud: PointCloud, train_config: TrainConfig,
                   scales: Sequence[float] = (1.0, 0.5),
                   rotations: Sequence[float] = (0.0, np.pi / 10)) -> RobustnessReport:
    """OA em cópias escaladas e rotacionadas da nuvem, com a diferença para a original"""
    baseline = evaluate_cloud(params, net, cloud, train_config).oa
    entries = []
    perturbations = [("scale", r, perturb_scale) for r in scales]
    perturbations += [("rotation", a, perturb_rotate_z) for a in rotations]
    for kind, value, perturb in perturbations:
        oa = evaluate_cloud(params, net, perturb(cloud, value), train_config).oa
        entries.append({"kind": kind, "value": float(value), "oa": oa, "delta": oa - baseline})
        logger.info("robustez %s=%.4f: OA %.4f (delta %+.4f)", kind, value, oa, oa - baseline)
    return RobustnessReport(baseline, entries)


# Ablação

@dataclass
class AblationRow:
    variant: str
    oa: float
    miou: float
    order_digest: str
    reference: dict

    def to_dict(self) -> dict:
        return asdict(self)


def run_ablation(dataset: List[BlockSample], net_config: NetworkConfig, train_config: TrainConfig,
                 variants: Sequence[str] = tuple(ABLATION_VARIANTS), progress: bool = False) -> List[AblationRow]:
    """Treina cada variante com os mesmos dados e semente e reporta OA/mIoU finais de treino"""
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"variante de ablação desconhecida: {unknown[0]}")
    base = replace(train_config, disable_cr=False, concat_cr=False, disable_gpm=False, disable_attention=False)
    rows = []
    for variant in variants:
        result = train(dataset, net_config, replace(base, **ABLATION_VARIANTS[variant]), progress=progress)
        rows.append(AblationRow(variant, result.final_report.oa, result.final_report.miou,
                                result.order_digest, REFERENCE_TARGETS[variant]))
        logger.info("ablação %s: OA %.4f, mIoU %.4f", variant, rows[-1].oa, rows[-1].miou)
    return rows


# Validação cruzada

@dataclass
class CrossValidationReport:
    folds: List[MetricsReport]
    merged: MetricsReport

    def to_dict(self, class_names: Optional[Sequence[str]] = None) -> dict:
        data = self.merged.to_dict(class_names)
        data["folds"] = [fold.to_dict() for fold in self.folds]
        return data


def fold_indices(count: int, folds: int, seed: int = 0) -> List[np.ndarray]:
    """Partição embaralhada de range(count) em `folds` partes de tamanhos quase iguais"""
    if folds < 2 or folds > count:
        raise ConfigError(f"validação cruzada com {folds} partes para {count} blocos")
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(count)
    return [np.sort(part) for part in np.array_split(order, folds)]


def run_cross_validation(dataset: List[BlockSample], net_config: NetworkConfig, train_config: TrainConfig,
                         folds: int = 6, progress: bool = False) -> CrossValidationReport:
    """
    Treina em k-1 partes, avalia a parte separada e soma as matrizes de confusão
    de todas as partes (média micro).
    """
    train_config.validate()
    if any(sample.labels is None for sample in dataset):
        raise ContractError("validação cruzada com blocos sem rótulos")
    parts = fold_indices(len(dataset), folds, train_config.resolved_seed())
    reports = []
    for fold, held_out in enumerate(parts):
        held = set(held_out.tolist())
        result = train([s for i, s in enumerate(dataset) if i not in held], net_config, train_config,
                       progress=progress)
        report = None
        for index in held_out:
            sample = dataset[index]
            logits = predict_block(result.params, result.net_config, sample)
            block = evaluate(predict_labels(logits), sample.labels, result.net_config.num_classes)
            report = block if report is None else report.merge(block)
        reports.append(report)
        logger.info("parte %d/%d: OA %.4f, mIoU %.4f", fold + 1, folds, report.oa, report.miou)

    merged = reports[0]
    for report in reports[1:]:
        merged = merged.merge(report)
    return CrossValidationReport(reports, merged)


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'variante':<12} {'OA':>8} {'mIoU':>8} {'OA ref':>8} {'mIoU ref':>9}"]
    for row in rows:
        lines.append(f"{row.variant:<12} {row.oa:>8.4f} {row.miou:>8.4f} "
                     f"{row.reference['oa']:>8.2f} {row.reference['miou']:>9.2f}")
    return "\n".join(lines)


# Verificação de gradiente da rede completa

def gradcheck_config() -> NetworkConfig:
    """Rede mínima com todos os módulos ativos"""
    return NetworkConfig(
        block_samples=32, in_channels=3, num_classes=2, k=3, enrich_radius=0.3,
        layer_scales=[16, 8], layer_radii=[0.3, 0.6], group_sizes=[8, 8],
        channel_widths=[8, 8], gpm_enabled=[True, True], gpm_stack_depth=2, mlp_layers=2,
        decoder_widths=[16, 16], context_mode="gated", use_attention=True,
    ).validate()


def gradcheck_block(net: NetworkConfig, seed: int = 0) -> BlockSample:
    """Bloco sintético de dois planos com exatamente block_samples pontos"""
    half = net.block_samples // 2
    scene = {"primitives": [
        {"kind": "horizontal_plane", "class": 0, "count": half, "params": {"z": 0.0}},
        {"kind": "horizontal_plane", "class": 1 % net.num_classes,
         "count": net.block_samples - half, "params": {"z": 0.5}},
    ]}
    cloud = generate_synthetic_scene(scene, seed)
    if cloud.num_features != net.in_channels:
        raise ConfigError(f"verificação de gradiente exige in_channels=3, configuração tem {net.in_channels}")
    return BlockSample(cloud.xyz - cloud.xyz.min(axis=0), cloud.xyz, cloud.labels)


def network_gradient_check(net: Optional[NetworkConfig] = None, seed: int = 0,
                           max_entries_per_param: int = 0, h: float = 1e-5) -> tc.GradCheckResult:
    net = (net or gradcheck_config()).validate()
    previous = tc.get_dtype()
    tc.set_precision("float64")
    try:
        params = init_params(net, seed)
        sample = gradcheck_block(net, seed)
        geometry = sample.geometry(net)

        def loss_fn():
            logits = forward_network(sample.features, sample.xyz, net, params, geometry)
            return cross_entropy_loss(logits, sample.labels, net.num_classes)

        result = tc.gradient_check(loss_fn, params.named(), h=h,
                                   max_entries_per_param=max_entries_per_param, seed=seed)
    finally:
        tc.set_precision("float32" if previous == np.float32 else "float64")
    logger.info("gradcheck: %d entradas, erro relativo máximo %.3e", result.checked, result.max_rel_error)
    return result


def write_report(data: dict, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
