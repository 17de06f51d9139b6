"""
Entrada e saída de nuvens de pontos, particionamento em blocos,
geração de cenas sintéticas e perturbações de robustez.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError, DegenerateInputError, FormatError, ParseError

logger = logging.getLogger(__name__)

KNOWN_COLUMNS = ("x", "y", "z", "r", "g", "b", "label")
ATTR_COLUMNS = ("r", "g", "b")

BINARY_MAGIC = b"PCLD"
BINARY_VERSION = 1

# Categorias de referência do S3DIS (13 classes)
S3DIS_CLASS_NAMES = (
    "ceiling", "floor", "wall", "beam", "column", "window", "door",
    "table", "chair", "sofa", "bookcase", "board", "clutter",
)


@dataclass
class PointCloud:
    """N pontos com coordenadas, atributos opcionais e rótulos opcionais"""
    xyz: np.ndarray
    attrs: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    attr_names: Tuple[str, ...] = ()

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.xyz)):
            raise ContractError("coordenadas não finitas na nuvem de pontos")
        if self.attrs is not None:
            self.attrs = np.asarray(self.attrs, dtype=np.float64)
            if self.attrs.ndim != 2:
                self.attrs = self.attrs.reshape(self.n, -1)
            if not self.attr_names:
                self.attr_names = ATTR_COLUMNS[: self.attrs.shape[1]]
            if len(self.attr_names) != self.attrs.shape[1]:
                raise FormatError(
                    f"atributos com largura {self.attrs.shape[1]} e nomes {list(self.attr_names)}"
                )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.n:
                raise FormatError(f"{self.labels.shape[0]} rótulos para {self.n} pontos")
            if self.n and self.labels.min() < 0:
                raise ContractError("rótulos negativos na nuvem de pontos")

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    @property
    def num_features(self) -> int:
        """C_f: coordenadas mais atributos extras"""
        return 3 + (0 if self.attrs is None else self.attrs.shape[1])

    def features(self) -> np.ndarray:
        if self.attrs is None:
            return self.xyz.copy()
        return np.concatenate([self.xyz, self.attrs], axis=1)

    def check_labels(self, num_classes: int):
        if self.labels is None:
            raise ContractError("nuvem de pontos sem rótulos")
        if self.n and self.labels.max() >= num_classes:
            raise ContractError(
                f"rótulo {int(self.labels.max())} fora do intervalo [0, {num_classes})"
            )

    def subset(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(
            xyz=self.xyz[indices],
            attrs=None if self.attrs is None else self.attrs[indices],
            labels=None if self.labels is None else self.labels[indices],
            attr_names=self.attr_names,
        )

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud(
            xyz=xyz,
            attrs=None if self.attrs is None else self.attrs.copy(),
            labels=None if self.labels is None else self.labels.copy(),
            attr_names=self.attr_names,
        )

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return PointCloud(
            xyz=self.xyz.copy(),
            attrs=None if self.attrs is None else self.attrs.copy(),
            labels=labels,
            attr_names=self.attr_names,
        )

    def column_names(self) -> List[str]:
        names = ["x", "y", "z", *self.attr_names]
        if self.labels is not None:
            names.append("label")
        return names


@dataclass
class Block:
    """Índices de um bloco reamostrado e a origem do cubo"""
    indices: np.ndarray
    origin: np.ndarray
    cell: Tuple[int, ...]

    @property
    def size(self) -> int:
        return self.indices.shape[0]


# Leitura e escrita

def load_cloud(path: str, format: Optional[str] = None) -> PointCloud:
    """Carrega uma nuvem em formato ascii ou binário (detectado pelo magic se omitido)"""
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as e:
        raise FormatError(f"Erro ao abrir nuvem de pontos '{path}': {str(e)}")

    if format is None:
        format = "binary" if raw[:4] == BINARY_MAGIC else "ascii"
    if format == "binary":
        cloud = _parse_binary(raw)
    elif format == "ascii":
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"Erro ao decodificar '{path}': {str(e)}")
        cloud = _parse_ascii(text)
    else:
        raise FormatError(f"formato desconhecido: {format}")
    logger.info("Nuvem carregada de %s: %d pontos, colunas %s", path, cloud.n, cloud.column_names())
    return cloud


def _infer_columns(width: int) -> List[str]:
    inferred = {3: "x y z", 4: "x y z label", 6: "x y z r g b", 7: "x y z r g b label"}
    if width not in inferred:
        raise FormatError(f"não é possível inferir colunas para largura {width} sem cabeçalho")
    return inferred[width].split()


def _validate_columns(names: List[str]) -> None:
    unknown = [c for c in names if c not in KNOWN_COLUMNS]
    if unknown:
        raise FormatError(f"colunas desconhecidas no cabeçalho: {unknown}")
    if len(set(names)) != len(names):
        raise FormatError(f"colunas duplicadas no cabeçalho: {names}")
    if names[:3] != ["x", "y", "z"]:
        raise FormatError(f"cabeçalho deve começar por x y z: {names}")


def _parse_ascii(text: str) -> PointCloud:
    lines = text.splitlines()
    numbered = [(i + 1, line) for i, line in enumerate(lines) if line.strip()]
    if not numbered:
        raise FormatError("arquivo ascii vazio")

    first_number, first = numbered[0]
    tokens = first.lstrip("#").split()
    try:
        [float(t) for t in tokens]
        names = _infer_columns(len(tokens))
        data_lines = numbered
    except ValueError:
        names = [t.lower() for t in tokens]
        data_lines = numbered[1:]
    _validate_columns(names)

    rows = np.empty((len(data_lines), len(names)), dtype=np.float64)
    for row, (line_number, line) in enumerate(data_lines):
        parts = line.split()
        if len(parts) != len(names):
            raise FormatError(
                f"linha {line_number}: {len(parts)} colunas, cabeçalho define {len(names)}"
            )
        for col, part in enumerate(parts):
            try:
                rows[row, col] = float(part)
            except ValueError:
                raise ParseError(f"valor não numérico '{part}'", line_number)
        if "label" in names:
            value = rows[row, names.index("label")]
            if value != np.floor(value):
                raise ParseError(f"rótulo não inteiro '{value}'", line_number)
    return _cloud_from_columns(names, rows)


def _cloud_from_columns(names: List[str], rows: np.ndarray) -> PointCloud:
    xyz = rows[:, :3]
    attr_names = tuple(c for c in names if c in ATTR_COLUMNS)
    attrs = None
    if attr_names:
        attrs = rows[:, [names.index(c) for c in attr_names]]
        # RGB em 0..255 é normalizado para [0, 1]
        if attrs.size and attrs.max() > 1.0:
            attrs = attrs / 255.0
    labels = rows[:, names.index("label")].astype(np.int64) if "label" in names else None
    return PointCloud(xyz=xyz, attrs=attrs, labels=labels, attr_names=attr_names)


def _parse_binary(raw: bytes) -> PointCloud:
    try:
        if raw[:4] != BINARY_MAGIC:
            raise FormatError(f"magic inválido: {raw[:4]!r}")
        version, n = struct.unpack_from("<HQ", raw, 4)
        if version != BINARY_VERSION:
            raise FormatError(f"versão binária não suportada: {version}")
        offset = 4 + struct.calcsize("<HQ")
        (ncols,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        names = []
        for _ in range(ncols):
            (length,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            names.append(raw[offset:offset + length].decode("ascii"))
            offset += length
        _validate_columns(names)

        float_names = [c for c in names if c != "label"]
        count = n * len(float_names)
        floats = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += floats.nbytes
        table = floats.reshape(n, len(float_names)).astype(np.float64)
        labels = None
        if "label" in names:
            labels = np.frombuffer(raw, dtype="<u2", count=n, offset=offset).astype(np.int64)
            offset += 2 * n
        if offset != len(raw):
            raise FormatError(f"{len(raw) - offset} bytes excedentes no arquivo binário")
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"Erro ao ler arquivo binário: {str(e)}")

    attr_names = tuple(c for c in float_names if c in ATTR_COLUMNS)
    attrs = table[:, [float_names.index(c) for c in attr_names]] if attr_names else None
    return PointCloud(xyz=table[:, :3], attrs=attrs, labels=labels, attr_names=attr_names)


def save_cloud(cloud: PointCloud, path: str, format: str = "ascii") -> None:
    """Grava a nuvem em ascii (round-trip exato em float64) ou binário (float32)"""
    names = cloud.column_names()
    floats = cloud.features()
    try:
        if format == "ascii":
            columns = [floats] if cloud.labels is None else [floats, cloud.labels[:, None]]
            table = np.concatenate(columns, axis=1) if cloud.n else np.empty((0, len(names)))
            fmt = ["%.17g"] * floats.shape[1] + (["%d"] if cloud.labels is not None else [])
            np.savetxt(path, table, fmt=fmt, header=" ".join(names), comments="")
        elif format == "binary":
            _write_binary(cloud, names, floats, path)
        else:
            raise FormatError(f"formato desconhecido: {format}")
    except OSError as e:
        raise FormatError(f"Erro ao gravar nuvem de pontos '{path}': {str(e)}")
    logger.info("Nuvem gravada em %s (%s, %d pontos)", path, format, cloud.n)


def _write_binary(cloud: PointCloud, names: List[str], floats: np.ndarray, path: str) -> None:
    header = bytearray(BINARY_MAGIC)
    header += struct.pack("<HQ", BINARY_VERSION, cloud.n)
    header += struct.pack("<B", len(names))
    for name in names:
        encoded = name.encode("ascii")
        header += struct.pack("<B", len(encoded)) + encoded
    with open(path, "wb") as handle:
        handle.write(bytes(header))
        handle.write(np.ascontiguousarray(floats, dtype="<f4").tobytes())
        if cloud.labels is not None:
            if cloud.n and cloud.labels.max() > np.iinfo(np.uint16).max:
                raise FormatError("rótulo não cabe em u16")
            handle.write(cloud.labels.astype("<u2").tobytes())


# Particionamento em blocos

def assign_cells(xyz: np.ndarray, cube_size: float = 1.0, mode: str = "xy") -> np.ndarray:
    """Célula geométrica de cada ponto: floor(coord / cube_size) em XY ou XYZ"""
    if mode not in ("xy", "xyz"):
        raise ContractError(f"modo de particionamento desconhecido: {mode}")
    if cube_size <= 0:
        raise ContractError(f"cube_size deve ser positivo: {cube_size}")
    dims = 2 if mode == "xy" else 3
    return np.floor(np.asarray(xyz)[:, :dims] / cube_size).astype(np.int64)


def partition_blocks(cloud: PointCloud, cube_size: float = 1.0, samples: int = 4096,
                     seed: int = 0, mode: str = "xy") -> List[Block]:
    """
    Divide a nuvem em células de cube_size e reamostra cada célula não vazia
    para exatamente `samples` pontos (sem reposição se houver pontos suficientes).
    """
    if cloud.n == 0:
        raise ContractError("particionamento de nuvem vazia")
    cells = assign_cells(cloud.xyz, cube_size, mode)
    unique, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(unique.shape[0] + 1))
    z_floor = cloud.xyz[:, 2].min()

    rng = np.random.default_rng(seed)
    blocks = []
    for c, cell in enumerate(unique):
        members = order[bounds[c]:bounds[c + 1]]
        chosen = rng.choice(members, size=samples, replace=members.size < samples)
        origin = np.zeros(3)
        origin[: cell.shape[0]] = cell * cube_size
        if mode == "xy":
            origin[2] = z_floor
        blocks.append(Block(indices=chosen.astype(np.int64), origin=origin, cell=tuple(int(v) for v in cell)))
    logger.info("Particionamento: %d pontos em %d blocos de %d amostras", cloud.n, len(blocks), samples)
    return blocks


def block_inputs(cloud: PointCloud, block: Block):
    """
    Entradas de rede de um bloco: atributos com xyz recentrado na origem do bloco,
    xyz original (para buscas de vizinhança) e rótulos (ou None).
    """
    xyz = cloud.xyz[block.indices]
    features = np.concatenate(
        [xyz - block.origin] + ([] if cloud.attrs is None else [cloud.attrs[block.indices]]), axis=1
    )
    labels = None if cloud.labels is None else cloud.labels[block.indices]
    return features, xyz, labels


# Cenas sintéticas

PRIMITIVE_KINDS = ("horizontal_plane", "vertical_plane", "box", "sphere_cluster")


@dataclass
class Primitive:
    kind: str
    class_id: int
    count: int
    params: Dict[str, Any] = field(default_factory=dict)
    jitter: float = 0.0
    color: Optional[Sequence[float]] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Primitive":
        unknown = set(data) - {"kind", "class", "count", "params", "jitter", "color"}
        if unknown:
            raise FormatError(f"campos desconhecidos na primitiva: {sorted(unknown)}")
        try:
            primitive = cls(kind=data["kind"], class_id=int(data["class"]), count=int(data["count"]),
                            params=dict(data.get("params", {})), jitter=float(data.get("jitter", 0.0)),
                            color=data.get("color"))
        except KeyError as e:
            raise FormatError(f"primitiva sem o campo {e}")
        if primitive.kind not in PRIMITIVE_KINDS:
            raise FormatError(f"tipo de primitiva desconhecido: {primitive.kind}")
        if primitive.count < 0 or primitive.class_id < 0 or primitive.jitter < 0:
            raise FormatError(f"primitiva com valores negativos: {data}")
        return primitive


@dataclass
class SceneSpec:
    primitives: List[Primitive]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        if "primitives" not in data:
            raise FormatError("especificação de cena sem 'primitives'")
        return cls([Primitive.from_dict(p) for p in data["primitives"]])

    @property
    def total_budget(self) -> int:
        return int(np.sum([p.count for p in self.primitives]))


def load_scene_spec(path: str) -> SceneSpec:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return SceneSpec.from_dict(json.load(handle))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"Erro ao carregar especificação de cena '{path}': {str(e)}")


def _sample_horizontal_plane(rng, count, params):
    x0, x1 = params.get("x_range", (0.0, 1.0))
    y0, y1 = params.get("y_range", (0.0, 1.0))
    xy = np.column_stack([rng.uniform(x0, x1, count), rng.uniform(y0, y1, count)])
    return np.column_stack([xy, np.full(count, float(params.get("z", 0.0)))])


def _sample_vertical_plane(rng, count, params):
    start = np.asarray(params.get("start", (0.0, 0.0)), dtype=np.float64)
    end = np.asarray(params.get("end", (1.0, 0.0)), dtype=np.float64)
    z0, z1 = params.get("z_range", (0.0, 1.0))
    t = rng.uniform(0.0, 1.0, count)
    xy = start[None, :] + t[:, None] * (end - start)[None, :]
    return np.column_stack([xy, rng.uniform(z0, z1, count)])


def _sample_box(rng, count, params):
    center = np.asarray(params.get("center", (0.5, 0.5, 0.5)), dtype=np.float64)
    size = np.asarray(params.get("size", (0.2, 0.2, 0.2)), dtype=np.float64)
    # faces sorteadas proporcionalmente à área
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]]).repeat(2)
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    local = rng.uniform(-0.5, 0.5, (count, 3))
    axis = faces // 2
    local[np.arange(count), axis] = np.where(faces % 2 == 0, -0.5, 0.5)
    return center + local * size


def _sample_sphere_cluster(rng, count, params):
    centers = np.asarray(params.get("centers", [(0.5, 0.5, 0.5)]), dtype=np.float64).reshape(-1, 3)
    radius = float(params.get("radius", 0.1))
    which = rng.integers(0, centers.shape[0], count)
    direction = rng.normal(size=(count, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    return centers[which] + radius * direction


_SAMPLERS = {
    "horizontal_plane": _sample_horizontal_plane,
    "vertical_plane": _sample_vertical_plane,
    "box": _sample_box,
    "sphere_cluster": _sample_sphere_cluster,
}


def generate_synthetic_scene(spec, seed: int = 0) -> PointCloud:
    """Amostra pontos rotulados nas superfícies das primitivas (determinístico pela semente)"""
    if isinstance(spec, dict):
        spec = SceneSpec.from_dict(spec)
    if spec.total_budget == 0:
        raise DegenerateInputError("cena sintética sem pontos (orçamento total zero)")

    rng = np.random.default_rng(seed)
    use_color = any(p.color is not None for p in spec.primitives)
    xyz_parts, label_parts, color_parts = [], [], []
    for primitive in spec.primitives:
        if primitive.count == 0:
            continue
        points = _SAMPLERS[primitive.kind](rng, primitive.count, primitive.params)
        if primitive.jitter > 0:
            points = points + rng.normal(0.0, primitive.jitter, points.shape)
        xyz_parts.append(points)
        label_parts.append(np.full(primitive.count, primitive.class_id, dtype=np.int64))
        if use_color:
            color = primitive.color if primitive.color is not None else (0.5, 0.5, 0.5)
            color_parts.append(np.tile(np.asarray(color, dtype=np.float64), (primitive.count, 1)))

    cloud = PointCloud(
        xyz=np.concatenate(xyz_parts),
        attrs=np.concatenate(color_parts) if use_color else None,
        labels=np.concatenate(label_parts),
    )
    logger.info("Cena sintética gerada: %d pontos, %d primitivas", cloud.n, len(spec.primitives))
    return cloud


# Perturbações de robustez

def perturb_scale(cloud: PointCloud, ratio: float) -> PointCloud:
    """Escala as coordenadas em torno do centróide"""
    if ratio <= 0:
        raise ContractError(f"razão de escala deve ser positiva: {ratio}")
    if ratio == 1.0:
        return cloud.with_xyz(cloud.xyz.copy())
    centroid = cloud.xyz.mean(axis=0)
    return cloud.with_xyz((cloud.xyz - centroid) * ratio + centroid)


def perturb_rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    """Rotaciona em torno do eixo vertical que passa pelo centróide (ângulo módulo 2π)"""
    angle = float(np.mod(angle, 2.0 * np.pi))
    if angle == 0.0:
        return cloud.with_xyz(cloud.xyz.copy())
    centroid = cloud.xyz.mean(axis=0)
    d = cloud.xyz - centroid
    c, s = np.cos(angle), np.sin(angle)
    rotated = np.column_stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1], d[:, 2]])
    return cloud.with_xyz(rotated + centroid)
