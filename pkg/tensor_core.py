"""
Motor mínimo de tensores densos com diferenciação automática reversa.

Cada operação gera um novo Tensor e, quando alguma entrada exige gradiente,
registra um nó no grafo ativo. O backward percorre os nós em ordem reversa
de inserção.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError, DegenerateInputError, DimensionError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2

_DTYPES = {"float64": np.float64, "float32": np.float32}
_state = threading.local()


def set_precision(precision: str):
    """Define o dtype padrão dos tensores criados (float64 ou float32)"""
    if precision not in _DTYPES:
        raise ContractError(f"precisão desconhecida: {precision}")
    _state.dtype = _DTYPES[precision]


def get_dtype():
    return getattr(_state, "dtype", np.float64)


class Tensor:
    """Array denso participando do grafo de diferenciação"""

    __slots__ = ("data", "requires_grad", "grad", "name", "graph", "node_index")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.graph: Optional["Graph"] = None
        self.node_index: Optional[int] = None

    @classmethod
    def wrap(cls, data: np.ndarray) -> "Tensor":
        # sem cópia: usado pelas operações, que sempre produzem arrays novos
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out.graph = None
        out.node_index = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    """Converte arrays em tensores constantes (sem gradiente)"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Graph:
    """Sequência append-only de nós; a ordem de inserção é a ordem topológica"""

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward) -> None:
        output.graph = self
        output.node_index = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, backward))

    def clear(self):
        self.nodes = []

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(f"backward exige perda escalar, recebeu forma {loss.shape}")
        if loss.graph is not self or not self.nodes:
            raise ContractError("backward em grafo vazio ou perda fora deste grafo")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes[: loss.node_index + 1]):
            upstream = node.output.grad
            if upstream is None:
                continue
            grads = node.backward(upstream)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ContractError(
                        f"gradiente de '{node.op}' com forma {grad.shape}, esperado {tensor.shape}"
                    )
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        self.clear()


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_graph() -> Optional[Graph]:
    """Grafo ativo; None dentro de no_grad()"""
    stack = _stack()
    if stack:
        return stack[-1]
    if not hasattr(_state, "default_graph"):
        _state.default_graph = Graph()
    return _state.default_graph


@contextmanager
def no_grad():
    """Executa operações sem registrar nós (inferência, diferenças finitas)"""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def _emit(op: str, inputs: Tuple[Tensor, ...], data: np.ndarray, backward) -> Tensor:
    out = Tensor.wrap(data)
    if any(t.requires_grad for t in inputs):
        graph = current_graph()
        if graph is not None:
            out.requires_grad = True
            graph.record(op, inputs, out, backward)
    return out


def backward(loss: Tensor):
    """Popula .grad de todos os tensores que exigem gradiente"""
    if loss.data.size != 1:
        raise ContractError(f"backward exige perda escalar, recebeu forma {loss.shape}")
    if loss.graph is None:
        raise ContractError("backward sem grafo registrado")
    loss.graph.backward(loss)


def find_non_finite(graph: Graph) -> Optional[str]:
    """Descreve o primeiro nó do grafo com valores não finitos"""
    for index, node in enumerate(graph.nodes):
        for tensor in node.inputs:
            if tensor.name and not np.all(np.isfinite(tensor.data)):
                return f"parâmetro '{tensor.name}'"
        if not np.all(np.isfinite(node.output.data)):
            label = node.output.name or node.op
            return f"nó {index} ({label}, forma {node.output.shape})"
    return None


# Operações

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Produto matricial 2D×2D, 3D×2D ou 3D×3D (lote na primeira dimensão)"""
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3) or (a.data.ndim == 2 and b.data.ndim == 3):
        raise DimensionError(f"matmul não suporta {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul com dimensões incompatíveis: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        if b_data.ndim == 3:
            gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        else:
            gb = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit("matmul", (a, b), np.matmul(a_data, b_data), grad_fn)


def fc(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Camada totalmente conectada: x·w + b, com b somado em todas as linhas"""
    if w.data.ndim != 2 or b.data.ndim != 1 or x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"fc com formas incompatíveis: x {x.shape}, w {w.shape}, b {b.shape}")
    x_data, w_data = x.data, w.data

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w_data.T
        gw = x_data.reshape(-1, x_data.shape[-1]).T @ g2
        return gx, gw, g2.sum(axis=0)

    return _emit("fc", (x, w, b), x_data @ w_data + b.data, grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    # forma com tanh evita overflow de exp para entradas muito negativas
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data)
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(positive, g, slope * g),))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, 0.0).astype(x.data.dtype)
    return _emit("relu", (x,), out, lambda g: (np.where(positive, g, 0.0).astype(g.dtype),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax no último eixo, com subtração do máximo por linha"""
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DegenerateInputError(f"softmax em eixo vazio: {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (x,), s, grad_fn)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"multiplicação elemento a elemento: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data
    return _emit("mul", (a, b), a_data * b_data, lambda g: (g * b_data, g * a_data))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Soma de formas iguais, ou soma de viés (b 1D no último eixo)"""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return _emit("add_bias", (a, b), a.data + b.data,
                     lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))
    raise DimensionError(f"soma com formas incompatíveis: {a.shape} + {b.shape}")


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatena no último eixo"""
    if not tensors:
        raise DegenerateInputError("concat_cols sem entradas")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_cols com formas incompatíveis: {[tuple(t.shape) for t in tensors]}"
            )
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def grad_fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    data = np.concatenate([t.data for t in tensors], axis=-1)
    return _emit("concat_cols", tuple(tensors), data, grad_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"slice_cols [{start}:{stop}] fora de {x.shape}")
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_cols", (x,), x.data[..., start:stop].copy(), grad_fn)


def split_cols(x: Tensor, widths: Sequence[int]) -> List[Tensor]:
    if int(np.sum(widths)) != x.shape[-1]:
        raise DimensionError(f"split_cols {list(widths)} não soma {x.shape[-1]}")
    parts, start = [], 0
    for width in widths:
        parts.append(slice_cols(x, start, start + width))
        start += width
    return parts


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, g, dtype=x.data.dtype),))


def mean(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise DegenerateInputError("média de tensor vazio")
    shape, n = x.shape, x.data.size
    return _emit("mean", (x,), np.asarray(x.data.mean()),
                 lambda g: (np.full(shape, g / n, dtype=x.data.dtype),))


def max_over_rows(x: Tensor) -> Tensor:
    """Máximo sobre o penúltimo eixo; empates vão para o menor índice"""
    if x.data.ndim < 2 or x.shape[-2] == 0:
        raise DegenerateInputError(f"max_over_rows em eixo vazio: {x.shape}")
    argmax = np.argmax(x.data, axis=-2)
    out = np.take_along_axis(x.data, argmax[..., None, :], axis=-2)[..., 0, :]
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, argmax[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _emit("max_over_rows", (x,), out, grad_fn)


def transpose_last(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise DimensionError(f"transpose_last exige ao menos 2 eixos: {x.shape}")
    return _emit("transpose", (x,), np.ascontiguousarray(np.swapaxes(x.data, -1, -2)),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(original),))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Seleciona linhas de x (n×c) por índices de forma arbitrária -> index.shape + (c,)"""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows exige tensor 2D, recebeu {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _emit("gather_rows", (x,), x.data[index], grad_fn)


def weighted_gather(x: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
    """out[i] = Σ_j weights[i, j] · x[index[i, j]]; pesos constantes"""
    index = np.asarray(index, dtype=np.int64)
    weights = np.asarray(weights, dtype=x.data.dtype)
    if x.data.ndim != 2 or index.shape != weights.shape or index.ndim != 2:
        raise DimensionError(
            f"weighted_gather: x {x.shape}, índices {index.shape}, pesos {weights.shape}"
        )
    shape = x.shape
    out = np.einsum("mk,mkc->mc", weights, x.data[index])

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, weights[..., None] * g[:, None, :])
        return (full,)

    return _emit("weighted_gather", (x,), out, grad_fn)


def permute_rows(x: Tensor, order: np.ndarray) -> Tensor:
    """Reordena o penúltimo eixo por uma permutação (por lote, se 3D)"""
    order = np.asarray(order, dtype=np.int64)
    if order.shape != x.shape[:-1]:
        raise DimensionError(f"permute_rows: ordem {order.shape} para tensor {x.shape}")
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, order[..., None], g, axis=-2)
        return (full,)

    return _emit("permute_rows", (x,), np.take_along_axis(x.data, order[..., None], axis=-2), grad_fn)


def canonical_row_order(data: np.ndarray) -> np.ndarray:
    """
    Ordem canônica das linhas (penúltimo eixo) que não depende da ordem de entrada:
    projeção fixa por linha seguida de ordenação estável. Linhas idênticas empatam.
    """
    probe = np.random.default_rng(0x5EED).standard_normal(data.shape[-1])
    keys = (data * probe.astype(data.dtype)).sum(axis=-1)
    return np.argsort(keys, axis=-1, kind="stable")


def inverse_order(order: np.ndarray) -> np.ndarray:
    return np.argsort(order, axis=-1, kind="stable")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Média de -log softmax(logits)[label] sobre as linhas"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"entropia cruzada: logits {logits.shape}, rótulos {labels.shape}")
    n = logits.shape[0]
    if n == 0:
        raise DegenerateInputError("entropia cruzada sem pontos")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = np.asarray(-log_p[rows, labels].mean())

    def grad_fn(g):
        probs = np.exp(log_p)
        probs[rows, labels] -= 1.0
        return (probs * (g / n),)

    return _emit("softmax_cross_entropy", (logits,), loss, grad_fn)


# Verificação de gradiente

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: Optional[Tuple[str, Tuple[int, ...]]]
    checked: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def gradient_check(fn: Callable[[], Tensor], params: Dict[str, Tensor], h: float = 1e-5,
                   max_entries_per_param: int = 0, seed: int = 0,
                   abs_floor: float = 1e-5) -> GradCheckResult:
    """
    Compara o gradiente analítico com diferenças finitas centrais.
    fn deve reconstruir a perda a partir dos parâmetros atuais.
    """
    for tensor in params.values():
        tensor.zero_grad()
    with Graph() as graph:
        loss = fn()
        graph.backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    rng = np.random.default_rng(seed)
    worst, max_err, checked = None, 0.0, 0
    with no_grad():
        for name, tensor in params.items():
            flat = tensor.data.reshape(-1)
            positions = np.arange(flat.size)
            if max_entries_per_param and flat.size > max_entries_per_param:
                positions = np.sort(rng.choice(flat.size, max_entries_per_param, replace=False))
            for pos in positions:
                original = flat[pos]
                flat[pos] = original + h
                f_plus = float(fn().data)
                flat[pos] = original - h
                f_minus = float(fn().data)
                flat[pos] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                exact = float(analytic[name].reshape(-1)[pos])
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
                checked += 1
                if err > max_err:
                    max_err = err
                    worst = (name, np.unravel_index(pos, tensor.shape))
    logger.debug("gradcheck: %d entradas, erro relativo máximo %.3e", checked, max_err)
    return GradCheckResult(max_err, worst, checked)


@dataclass
class Linear:
    """Par peso/viés de uma camada FC"""
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return fc(x, self.w, self.b)


def glorot_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Linear:
    """Inicialização Glorot-uniforme para pesos e zeros para o viés"""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return Linear(Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True))
