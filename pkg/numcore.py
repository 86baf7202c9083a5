"""
Numeric core for DPT training.
Named parameter storage with freezing, a reverse-mode gradient tape over dense
and sparse array primitives, the AdamW optimizer, inverted dropout, and
deterministic randomness.

Random streams use numpy's PCG64 bit generator, whose output for a given seed
is fixed across platforms and numpy releases.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from config import Config
from logger import setup_logger
from utils import derive_seed

logger = setup_logger("NumCore")

Shape = Tuple[int, ...]


def seeded_rng(seed: int) -> np.random.Generator:
    """
    Deterministic generator for a non-negative integer seed (PCG64).

    Args:
        seed: Non-negative integer seed

    Returns:
        numpy Generator
    """
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def xavier_uniform(seed: int, key: str, shape: Shape) -> np.ndarray:
    """
    Xavier/Glorot uniform init, a pure function of (seed, key, shape).

    Matrices use (rows, cols) as (fan_in, fan_out); vectors of length n use (1, n).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        fan_in, fan_out = 1, shape[0]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise ValueError(f"xavier init supports 1-D or 2-D shapes, got {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = seeded_rng(derive_seed(seed, 'init', key))
    return rng.uniform(-bound, bound, size=shape)


def dropout(values: np.ndarray, keep_prob: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Inverted dropout.

    Args:
        values: Input array
        keep_prob: Probability of keeping an entry, in (0, 1]
        training: Identity when False
        rng: Generator for the keep mask (required when training and keep_prob < 1)

    Returns:
        Array with dropped entries zeroed and kept entries scaled by 1/keep_prob
    """
    if not (0.0 < keep_prob <= 1.0):
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return values
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    mask = rng.random(np.shape(values)) < keep_prob
    return values * mask / keep_prob


@dataclass(eq=False)
class Parameter:
    """Named trainable array with a gradient slot and a frozen flag."""
    name: str
    values: np.ndarray
    frozen: bool = False
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> Shape:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)


class ParameterStore:
    """
    Name -> Parameter table. Iteration is always in sorted-name order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._params: Dict[str, Parameter] = {}

    def add(self, name: str, shape: Sequence[int], init: str = 'xavier',
            values: Optional[np.ndarray] = None, frozen: bool = False,
            key: Optional[str] = None) -> Parameter:
        """
        Register a parameter.

        Args:
            name: Unique parameter name
            shape: Parameter shape
            init: 'xavier' or 'zeros' (ignored when values is given)
            values: Explicit initial values
            frozen: Initial frozen flag
            key: Init stream name (defaults to name)

        Returns:
            The new Parameter
        """
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if values is not None:
            values = np.array(values, dtype=np.float64)
            if values.shape != shape:
                raise ValueError(f"values for {name!r} have shape {values.shape}, expected {shape}")
        elif init == 'xavier':
            values = xavier_uniform(self.seed, key or name, shape)
        elif init == 'zeros':
            values = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        param = Parameter(name, values, frozen)
        self._params[name] = param
        return param

    def reinitialize(self, name: str, key: str):
        """Redraw a parameter's values with Xavier init under a new stream key."""
        param = self[name]
        param.values = xavier_uniform(self.seed, key, param.shape)
        param.grad = np.zeros_like(param.values)

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return sorted(self._params)

    def __iter__(self) -> Iterator[Parameter]:
        for name in self.names():
            yield self._params[name]

    def items(self):
        return [(name, self._params[name]) for name in self.names()]

    def freeze(self, names: Optional[Sequence[str]] = None):
        """Freeze the named parameters (all when names is None)."""
        for name in (self.names() if names is None else names):
            self[name].frozen = True

    def unfreeze(self, names: Sequence[str]):
        for name in names:
            self[name].frozen = False

    def trainable_names(self) -> List[str]:
        return [p.name for p in self if not p.frozen]

    def count_trainable_entries(self) -> int:
        return sum(p.size for p in self if not p.frozen)

    def zero_grad(self):
        for p in self:
            p.grad[...] = 0.0

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self}


@dataclass
class OptimizerState:
    """AdamW hyperparameters plus per-parameter moment estimates."""
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def adamw_step(store: ParameterStore, state: OptimizerState):
    """
    One AdamW update (decoupled weight decay) on every unfrozen parameter.

    Frozen parameters are skipped entirely; their bytes never change.
    """
    state.step += 1
    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in store.items():
        if param.frozen:
            continue
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or m.shape != param.shape:
            m = np.zeros_like(param.values)
            v = np.zeros_like(param.values)
        grad = param.grad
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v

        if state.weight_decay:
            param.values *= (1.0 - state.lr * state.weight_decay)
        param.values -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


class Node:
    """One recorded value on a Tape."""
    __slots__ = ('value', 'grad', 'parents', 'backward_fn', 'op', 'requires_grad', 'param')

    def __init__(self, value: np.ndarray, op: str, parents: Tuple['Node', ...] = (),
                 backward_fn: Optional[Callable] = None, requires_grad: bool = False,
                 param: Optional[Parameter] = None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self) -> Shape:
        return self.value.shape


def _same_shape(op: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Tape:
    """
    Reverse-mode gradient tape.

    Every primitive evaluates eagerly and records a closure mapping the
    output gradient to its parents' gradients. Nodes that depend on no
    trainable parameter record nothing to backpropagate.
    """

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.nodes: List[Node] = []
        self._leaves: Dict[str, Node] = {}

    def _record(self, op: str, value, parents: Tuple[Node, ...], backward_fn: Callable) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by {op}")
        requires = self.grad_enabled and any(p.requires_grad for p in parents)
        node = Node(value, op, parents if requires else (), backward_fn if requires else None, requires)
        self.nodes.append(node)
        return node

    def parameter(self, param: Parameter) -> Node:
        """Leaf node for a parameter (one per parameter per tape)."""
        node = self._leaves.get(param.name)
        if node is None:
            node = Node(param.values, 'parameter', requires_grad=self.grad_enabled and not param.frozen,
                        param=param)
            self._leaves[param.name] = node
            self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError("non-finite value produced by constant")
        node = Node(value, 'constant')
        self.nodes.append(node)
        return node

    def backward(self, loss: Node):
        """Propagate d(loss) to every node and accumulate into unfrozen parameters."""
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or not node.requires_grad:
                continue
            if node.param is not None:
                node.param.grad += node.grad
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                parent.grad = grad if parent.grad is None else parent.grad + grad

    # Elementwise and linear primitives

    def add(self, a: Node, b: Node) -> Node:
        _same_shape('add', a, b)
        return self._record('add', a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        _same_shape('sub', a, b)
        return self._record('sub', a.value - b.value, (a, b), lambda g: (g, -g))

    def scale(self, a: Node, factor: float) -> Node:
        return self._record('scale', a.value * factor, (a,), lambda g: (g * factor,))

    def mul(self, a: Node, b: Node) -> Node:
        _same_shape('mul', a, b)
        av, bv = a.value, b.value
        return self._record('mul', av * bv, (a, b), lambda g: (g * bv, g * av))

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
        return self._record('matmul', av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def matvec(self, a: Node, v: Node) -> Node:
        av, vv = a.value, v.value
        if av.ndim != 2 or vv.ndim != 1 or av.shape[1] != vv.shape[0]:
            raise ValueError(f"matvec: incompatible shapes {av.shape} @ {vv.shape}")
        return self._record('matvec', av @ vv, (a, v), lambda g: (np.outer(g, vv), av.T @ g))

    def spmm(self, matrix: sp.spmatrix, x: Node) -> Node:
        """Constant sparse matrix times a dense node."""
        if matrix.shape[1] != x.shape[0]:
            raise ValueError(f"spmm: incompatible shapes {matrix.shape} @ {x.shape}")
        transposed = matrix.T.tocsr()
        return self._record('spmm', np.asarray(matrix @ x.value), (x,),
                            lambda g: (np.asarray(transposed @ g),))

    def concat(self, nodes: Sequence[Node], axis: int = 1) -> Node:
        values = [n.value for n in nodes]
        sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

        def backward(g):
            return tuple(np.split(g, sizes, axis=axis))
        return self._record('concat', np.concatenate(values, axis=axis), tuple(nodes), backward)

    def scale_rows(self, a: Node, s: Node) -> Node:
        """a[r, :] * s[r]."""
        av, sv = a.value, s.value
        if av.ndim != 2 or sv.shape != (av.shape[0],):
            raise ValueError(f"scale_rows: incompatible shapes {av.shape} and {sv.shape}")
        return self._record('scale_rows', av * sv[:, None], (a, s),
                            lambda g: (g * sv[:, None], np.sum(g * av, axis=1)))

    def add_row(self, a: Node, v: Node) -> Node:
        """Add vector v to every row of a."""
        if a.value.ndim != 2 or v.shape != (a.shape[1],):
            raise ValueError(f"add_row: incompatible shapes {a.shape} and {v.shape}")
        return self._record('add_row', a.value + v.value, (a, v), lambda g: (g, g.sum(axis=0)))

    def mul_row(self, a: Node, v: Node) -> Node:
        """Multiply every row of a elementwise by vector v."""
        av, vv = a.value, v.value
        if av.ndim != 2 or vv.shape != (av.shape[1],):
            raise ValueError(f"mul_row: incompatible shapes {av.shape} and {vv.shape}")
        return self._record('mul_row', av * vv, (a, v), lambda g: (g * vv, np.sum(g * av, axis=0)))

    def add_scalar(self, a: Node, value: float) -> Node:
        return self._record('add_scalar', a.value + value, (a,), lambda g: (g,))

    def pair_conv(self, a: Node, b: Node, kernel: Node) -> Node:
        """
        Stride-1 2x1 convolution over the stacked pair [a ; b]:
        kernel[0] * a + kernel[1] * b + kernel[2], shared across all entries.
        """
        _same_shape('pair_conv', a, b)
        if kernel.shape != (3,):
            raise ValueError(f"pair_conv kernel must have shape (3,), got {kernel.shape}")
        av, bv, kv = a.value, b.value, kernel.value

        def backward(g):
            return g * kv[0], g * kv[1], np.array([np.sum(g * av), np.sum(g * bv), np.sum(g)])
        return self._record('pair_conv', kv[0] * av + kv[1] * bv + kv[2], (a, b, kernel), backward)

    # Reductions and indexing

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._record('sum', np.sum(a.value), (a,), lambda g: (np.full(shape, float(g)),))

    def mean(self, a: Node) -> Node:
        shape, count = a.shape, a.value.size
        if count == 0:
            raise ValueError("mean of an empty array")
        return self._record('mean', np.mean(a.value), (a,), lambda g: (np.full(shape, float(g) / count),))

    def row_sum(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise ValueError(f"row_sum needs a matrix, got shape {a.shape}")
        shape = a.shape
        return self._record('row_sum', a.value.sum(axis=1), (a,),
                            lambda g: (np.broadcast_to(g[:, None], shape).copy(),))

    def gather(self, a: Node, index: np.ndarray) -> Node:
        """Rows a[index]; the gradient scatters back onto the gathered rows."""
        index = np.asarray(index, dtype=np.int64)
        rows = a.shape[0]
        if index.size and (index.min() < 0 or index.max() >= rows):
            raise IndexError(f"gather index out of range for {rows} rows")
        shape = a.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)
        return self._record('gather', np.take(a.value, index, axis=0), (a,), backward)

    def scatter_add(self, a: Node, index: np.ndarray, num_rows: int) -> Node:
        """out[index[r]] += a[r] into a num_rows-row output."""
        index = np.asarray(index, dtype=np.int64)
        if index.shape != (a.shape[0],):
            raise ValueError("scatter_add: one target row per input row is required")
        if index.size and (index.min() < 0 or index.max() >= num_rows):
            raise IndexError(f"scatter_add index out of range for {num_rows} rows")
        out = np.zeros((num_rows,) + a.shape[1:])
        np.add.at(out, index, a.value)
        return self._record('scatter_add', out, (a,), lambda g: (np.take(g, index, axis=0),))

    def row(self, a: Node, index: int) -> Node:
        """Single row a[index] as a vector node."""
        if not 0 <= index < a.shape[0]:
            raise IndexError(f"row {index} out of range for {a.shape[0]} rows")
        shape = a.shape

        def backward(g):
            out = np.zeros(shape)
            out[index] = g
            return (out,)
        return self._record('row', a.value[index], (a,), backward)

    def pick(self, a: Node, position: Tuple[int, ...]) -> Node:
        """Single element a[position] as a scalar node."""
        shape = a.shape

        def backward(g):
            out = np.zeros(shape)
            out[position] = g
            return (out,)
        return self._record('pick', a.value[position], (a,), backward)

    # Nonlinearities

    def sigmoid(self, a: Node) -> Node:
        s = expit(a.value)
        return self._record('sigmoid', s, (a,), lambda g: (g * s * (1.0 - s),))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._record('relu', a.value * mask, (a,), lambda g: (g * mask,))

    def log(self, a: Node) -> Node:
        av = a.value
        if np.any(av <= 0):
            raise FloatingPointError("non-finite value produced by log")
        return self._record('log', np.log(av), (a,), lambda g: (g / av,))

    def log_sigmoid(self, a: Node, floor: float = Config.PROB_CLIP) -> Node:
        """
        log(clip(sigmoid(a), floor, 1)), evaluated stably.

        The gradient of the unclipped log-sigmoid is passed through at
        clipped entries.
        """
        av = a.value
        value = np.maximum(-np.logaddexp(0.0, -av), np.log(floor))
        return self._record('log_sigmoid', value, (a,), lambda g: (g * expit(-av),))

    def clip(self, a: Node, low: float, high: float) -> Node:
        av = a.value
        inside = (av >= low) & (av <= high)
        return self._record('clip', np.clip(av, low, high), (a,), lambda g: (g * inside,))

    def reciprocal(self, a: Node) -> Node:
        av = a.value
        if np.any(av == 0):
            raise FloatingPointError("non-finite value produced by reciprocal")
        return self._record('reciprocal', 1.0 / av, (a,), lambda g: (-g / (av * av),))

    def dropout(self, a: Node, keep_prob: float, training: bool,
                rng: Optional[np.random.Generator] = None) -> Node:
        if not (0.0 < keep_prob <= 1.0):
            raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
        if not training or keep_prob == 1.0:
            return a
        if rng is None:
            raise ValueError("dropout in training mode needs a generator")
        factor = (rng.random(a.shape) < keep_prob) / keep_prob
        return self._record('dropout', a.value * factor, (a,), lambda g: (g * factor,))


LossFn = Callable[[Tape], Node]


def tape_forward_backward(store: ParameterStore, loss_fn: LossFn) -> float:
    """
    Evaluate loss_fn on a fresh tape and populate parameter gradients.

    Args:
        store: Parameters read by loss_fn (all grads are zeroed first)
        loss_fn: Builds the scalar loss node from a Tape

    Returns:
        Loss value
    """
    store.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    return float(loss.value)


def evaluate_loss(loss_fn: LossFn) -> float:
    """Forward-only evaluation (no gradient bookkeeping)."""
    return float(loss_fn(Tape(grad_enabled=False)).value)


def finite_difference_check(store: ParameterStore, loss_fn: LossFn, h: float = 1e-5,
                            names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """
    Compare tape gradients against central finite differences.

    loss_fn must be deterministic (no fresh dropout masks or resampling).

    Args:
        store: Parameter store
        loss_fn: Scalar loss builder
        h: Perturbation size
        names: Parameters to check (default: all unfrozen)

    Returns:
        Dict of parameter name -> norm-wise relative error
        (absolute error when both gradient norms are below 1e-7)
    """
    tape_forward_backward(store, loss_fn)
    analytic = {p.name: p.grad.copy() for p in store}
    errors: Dict[str, float] = {}
    for name in (names if names is not None else store.trainable_names()):
        param = store[name]
        numeric = np.zeros_like(param.values)
        flat_values = param.values.reshape(-1)
        flat_numeric = numeric.reshape(-1)
        for idx in range(flat_values.size):
            original = flat_values[idx]
            flat_values[idx] = original + h
            plus = evaluate_loss(loss_fn)
            flat_values[idx] = original - h
            minus = evaluate_loss(loss_fn)
            flat_values[idx] = original
            flat_numeric[idx] = (plus - minus) / (2.0 * h)

        diff = np.linalg.norm(analytic[name] - numeric)
        scale = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric))
        errors[name] = float(diff if scale < 1e-7 else diff / scale)
        logger.debug(f"gradcheck {name}: error={errors[name]:.3e} over {param.size} entries")
    return errors
