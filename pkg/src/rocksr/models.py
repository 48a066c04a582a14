"""SR-Resnet, EDSR and WDSR-A/B as declarative node graphs.

A :class:`ModelGraph` is an ordered list of :class:`Node` objects (``conv``,
``act``, ``bn``, ``d2s`` and ``add``) plus a parameter store. Nodes read the
outputs of earlier nodes by name; ``"input"`` is the LR batch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor, check_4d, check_axis

FAMILIES = ("sr-resnet", "edsr", "wdsr-a", "wdsr-b")

_ALIASES = {
    "srresnet": "sr-resnet",
    "sr_resnet": "sr-resnet",
    "sr-resnet": "sr-resnet",
    "edsr": "edsr",
    "wdsr-a": "wdsr-a",
    "wdsr_a": "wdsr-a",
    "wdsra": "wdsr-a",
    "wdsr-b": "wdsr-b",
    "wdsr_b": "wdsr-b",
    "wdsrb": "wdsr-b",
}

DEFAULT_BLOCKS = {"sr-resnet": 16, "edsr": 8, "wdsr-a": 8, "wdsr-b": 8}
DEFAULT_FILTERS = {"sr-resnet": 64, "edsr": 64, "wdsr-a": 32, "wdsr-b": 32}
DEFAULT_EXPANSION = {"wdsr-a": 4, "wdsr-b": 6}


class UnsupportedScaleError(ValueError):
    pass


def canonical_family(name):
    key = str(name).strip().lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown model family {name!r}; choose from {', '.join(FAMILIES)}")
    return _ALIASES[key]


@dataclass(frozen=True)
class ModelSpec:
    """What to build. ``None`` fields take the family default on :meth:`resolved`."""

    family: str
    num_residual_blocks: int | None = None
    base_filters: int | None = None
    scale: int = 4
    channels: int = 1
    final_kernel: int | None = None
    expansion: int | None = None
    linear_ratio: float = 0.8
    prelu_init: float = 0.25

    def resolved(self):
        fam = canonical_family(self.family)
        final_kernel = self.final_kernel
        if final_kernel is None and fam in ("sr-resnet", "edsr"):
            final_kernel = 9 if fam == "sr-resnet" else 3
        return replace(
            self,
            family=fam,
            num_residual_blocks=DEFAULT_BLOCKS[fam] if self.num_residual_blocks is None
            else int(self.num_residual_blocks),
            base_filters=DEFAULT_FILTERS[fam] if self.base_filters is None else int(self.base_filters),
            final_kernel=final_kernel,
            expansion=DEFAULT_EXPANSION.get(fam) if self.expansion is None else int(self.expansion),
        )

    def to_dict(self):
        return asdict(self.resolved())

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known}).resolved()


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict, compare=True)


class ModelGraph:
    """Executable network: nodes, learnable parameters, BN running statistics."""

    def __init__(self, spec, nodes, params, bn_states, dtype):
        self.spec = spec
        self.nodes = list(nodes)
        self.params = params
        self.bn_states = bn_states
        self.dtype = np.dtype(dtype)
        self.metadata = {}
        self._cache = None
        self._check_graph()

    # -- structure ---------------------------------------------------------

    def _check_graph(self):
        seen = {"input"}
        for node in self.nodes:
            for src in node.inputs:
                if src not in seen:
                    raise ValueError(f"node {node.name!r} reads undefined output {src!r}")
            if node.op == "add" and len(node.inputs) != 2:
                raise ValueError(f"add node {node.name!r} needs exactly two inputs")
            seen.add(node.name)

    @property
    def output_name(self):
        return self.nodes[-1].name

    def node_ops(self):
        return [n.op for n in self.nodes]

    def conv_nodes(self):
        return [n for n in self.nodes if n.op == "conv"]

    def receptive_radius(self):
        """Upper bound on the LR-pixel radius that influences one output pixel."""
        return sum((n.attrs["k"] - 1) // 2 for n in self.conv_nodes())

    def count_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def conv_weight(self, node):
        a = node.attrs
        if a["weight_norm"]:
            return ops.weight_norm_materialize(self.params[f"{node.name}.g"].data,
                                               self.params[f"{node.name}.v"].data)
        return self.params[f"{node.name}.weight"].data

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for name, st in self.bn_states.items():
            st.gamma = self.params[f"{name}.gamma"].data
            st.beta = self.params[f"{name}.beta"].data
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        self.dtype = dtype
        return self

    # -- execution ---------------------------------------------------------

    def forward(self, x, training=False):
        """Run the network on an LR batch ``(B, C, h, w)`` -> ``(B, C, n*h, n*w)``.

        With ``training=True`` the intermediate values needed by
        :meth:`backward` are kept and batch norm uses batch statistics.
        """
        x = check_4d(x)
        check_axis(x, 1, self.spec.channels)
        x = np.asarray(x, dtype=self.dtype)
        keep = training
        last_use = {}
        if not keep:
            for i, node in enumerate(self.nodes):
                for src in node.inputs:
                    last_use[src] = i
        outs = {"input": x}
        cache = {}
        for i, node in enumerate(self.nodes):
            ins = [outs[s] for s in node.inputs]
            op = node.op
            if op == "conv":
                w = self.conv_weight(node)
                p = ops.ConvParams(w, self.params[f"{node.name}.bias"].data)
                if keep:
                    y, padded = ops.conv2d_forward(ins[0], p, return_cache=True)
                    cache[node.name] = (p, padded)
                else:
                    y = ops.conv2d_forward(ins[0], p)
            elif op == "act":
                spec = self._act_spec(node)
                y = ops.activation_forward(ins[0], spec)
                if keep:
                    cache[node.name] = spec
            elif op == "bn":
                st = self.bn_states[node.name]
                y, bn_cache = ops.batch_norm(ins[0], st, training=training)
                if keep:
                    cache[node.name] = bn_cache
            elif op == "d2s":
                y = ops.depth_to_space(ins[0], node.attrs["n"])
            elif op == "add":
                if ins[0].shape != ins[1].shape:
                    raise DimensionError(
                        f"add node {node.name!r}: shapes {ins[0].shape} and {ins[1].shape} differ")
                y = ins[0] + ins[1]
            else:
                raise ValueError(f"unknown op {op!r}")
            outs[node.name] = y
            if not keep:
                for src in node.inputs:
                    if last_use.get(src) == i and src != "input":
                        del outs[src]
        self._cache = (outs, cache) if keep else None
        return outs[self.output_name]

    def backward(self, dout):
        """Back-propagate ``dout`` from the last :meth:`forward` (training=True).

        Parameter gradients accumulate into ``Tensor.grad``; the input
        gradient is returned.
        """
        if self._cache is None:
            raise RuntimeError("backward() requires a preceding forward(training=True)")
        outs, cache = self._cache
        grads = {self.output_name: dout}

        def push(name, g):
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g

        for node in reversed(self.nodes):
            g = grads.pop(node.name, None)
            if g is None:
                continue
            x = outs[node.inputs[0]]
            if node.op == "conv":
                p, padded = cache[node.name]
                dx, dw, db = ops.conv2d_backward(g, x, p, cache=padded)
                self.params[f"{node.name}.bias"].accumulate(db)
                if node.attrs["weight_norm"]:
                    gp = self.params[f"{node.name}.g"]
                    vp = self.params[f"{node.name}.v"]
                    dg, dv = ops.weight_norm_backward(dw, gp.data, vp.data)
                    gp.accumulate(dg)
                    vp.accumulate(dv)
                else:
                    self.params[f"{node.name}.weight"].accumulate(dw)
                push(node.inputs[0], dx)
            elif node.op == "act":
                dx, dalpha = ops.activation_backward(g, x, cache[node.name])
                if dalpha is not None:
                    self.params[f"{node.name}.alpha"].accumulate(dalpha)
                push(node.inputs[0], dx)
            elif node.op == "bn":
                st = self.bn_states[node.name]
                dx, dgamma, dbeta = ops.batch_norm_backward(g, cache[node.name], st)
                self.params[f"{node.name}.gamma"].accumulate(dgamma)
                self.params[f"{node.name}.beta"].accumulate(dbeta)
                push(node.inputs[0], dx)
            elif node.op == "d2s":
                push(node.inputs[0], ops.space_to_depth(g, node.attrs["n"]))
            elif node.op == "add":
                push(node.inputs[0], g)
                push(node.inputs[1], g)
        return grads.get("input")

    def _act_spec(self, node):
        kind = node.attrs["kind"]
        if kind == "prelu":
            return ops.ActivationSpec("prelu", self.params[f"{node.name}.alpha"].data)
        return ops.ActivationSpec(kind, node.attrs.get("alpha", 0.0))

    def upscale(self, image, tile=96, clamp=True):
        """Super-resolve one 2-D image (or a ``(B, C, h, w)`` batch) in inference mode.

        Large inputs are processed in overlapping tiles whose halo covers
        the receptive field, so the result does not depend on ``tile``
        beyond floating-point summation order.
        """
        arr = np.asarray(image)
        squeeze = arr.ndim == 2
        if squeeze:
            arr = arr[None, None]
        arr = check_4d(arr)
        _, _, h, w = arr.shape
        n = self.spec.scale
        if tile is None or (h <= tile and w <= tile):
            out = self.forward(arr, training=False)
        else:
            r = self.receptive_radius()
            out = np.empty(arr.shape[:2] + (h * n, w * n), dtype=self.dtype)
            for y0 in range(0, h, tile):
                y1 = min(h, y0 + tile)
                for x0 in range(0, w, tile):
                    x1 = min(w, x0 + tile)
                    ya, yb = max(0, y0 - r), min(h, y1 + r)
                    xa, xb = max(0, x0 - r), min(w, x1 + r)
                    piece = self.forward(arr[:, :, ya:yb, xa:xb], training=False)
                    oy, ox = (y0 - ya) * n, (x0 - xa) * n
                    out[:, :, y0 * n:y1 * n, x0 * n:x1 * n] = \
                        piece[:, :, oy:oy + (y1 - y0) * n, ox:ox + (x1 - x0) * n]
        if clamp:
            out = np.clip(out, 0.0, 1.0)
        return out[0, 0] if squeeze else out

    __call__ = upscale


def forward(model, lr_batch, training=False):
    return model.forward(lr_batch, training=training)


def count_parameters(model):
    return model.count_parameters()


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

class _GraphBuilder:
    def __init__(self, spec, rng, dtype):
        self.spec = spec
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self.params = {}
        self.bn_states = {}
        self.last = "input"

    def _add(self, node):
        self.nodes.append(node)
        self.last = node.name
        return node.name

    def conv(self, name, cin, cout, k, src=None, weight_norm=False, zero_gain=False):
        src = self.last if src is None else src
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / fan_in)
        w = self.rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(self.dtype)
        if weight_norm:
            v = w
            g = np.sqrt((v.reshape(cout, -1) ** 2).sum(axis=1))
            if zero_gain:
                g = np.zeros_like(g)
            self.params[f"{name}.g"] = Tensor(g.astype(self.dtype))
            self.params[f"{name}.v"] = Tensor(v)
        else:
            self.params[f"{name}.weight"] = Tensor(w)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=self.dtype))
        return self._add(Node(name, "conv", (src,),
                              {"in": cin, "out": cout, "k": k, "weight_norm": weight_norm}))

    def act(self, name, kind, channels=None, src=None, alpha=0.0):
        src = self.last if src is None else src
        attrs = {"kind": kind}
        if kind == "prelu":
            self.params[f"{name}.alpha"] = Tensor(
                np.full(channels, self.spec.prelu_init, dtype=self.dtype))
            attrs["channels"] = channels
        elif kind == "lrelu":
            attrs["alpha"] = alpha
        return self._add(Node(name, "act", (src,), attrs))

    def bn(self, name, channels, src=None):
        src = self.last if src is None else src
        st = ops.BatchNormState.create(channels, dtype=self.dtype)
        self.bn_states[name] = st
        self.params[f"{name}.gamma"] = Tensor(st.gamma)
        self.params[f"{name}.beta"] = Tensor(st.beta)
        return self._add(Node(name, "bn", (src,), {"channels": channels}))

    def d2s(self, name, n, src=None):
        src = self.last if src is None else src
        return self._add(Node(name, "d2s", (src,), {"n": n}))

    def add(self, name, a, b):
        return self._add(Node(name, "add", (a, b)))

    def build(self):
        return ModelGraph(self.spec, self.nodes, self.params, self.bn_states, self.dtype)


def _doublings(scale):
    if scale < 1 or scale & (scale - 1):
        raise UnsupportedScaleError(
            f"scale {scale} is not a power of 2; SR-Resnet/EDSR upsample by chained x2 shuffles")
    return int(round(math.log2(scale)))


def _require(spec, family):
    spec = spec.resolved()
    if spec.family != family:
        raise ValueError(f"expected a {family} spec, got {spec.family}")
    if spec.num_residual_blocks < 0:
        raise ValueError("num_residual_blocks must be >= 0")
    return spec


def build_sr_resnet(spec, rng=None, dtype=np.float64):
    spec = _require(spec, "sr-resnet")
    rng = np.random.default_rng(0) if rng is None else rng
    doublings = _doublings(spec.scale)
    f, c = spec.base_filters, spec.channels
    b = _GraphBuilder(spec, rng, dtype)
    b.conv("head", c, f, 9)
    head = b.act("head.act", "prelu", f)
    for i in range(spec.num_residual_blocks):
        start = b.last
        b.conv(f"block{i}.conv1", f, f, 3)
        b.bn(f"block{i}.bn1", f)
        b.act(f"block{i}.act", "prelu", f)
        b.conv(f"block{i}.conv2", f, f, 3)
        b.bn(f"block{i}.bn2", f)
        b.add(f"block{i}.add", b.last, start)
    b.conv("body.conv", f, f, 3)
    b.bn("body.bn", f)
    b.add("skip.add", b.last, head)
    for i in range(doublings):
        b.conv(f"up{i}.conv", f, 4 * f, 3)
        b.d2s(f"up{i}.shuffle", 2)
        b.act(f"up{i}.act", "prelu", f)
    b.conv("tail", f, c, spec.final_kernel)
    return b.build()


def build_edsr(spec, rng=None, dtype=np.float64):
    spec = _require(spec, "edsr")
    rng = np.random.default_rng(0) if rng is None else rng
    doublings = _doublings(spec.scale)
    f, c = spec.base_filters, spec.channels
    b = _GraphBuilder(spec, rng, dtype)
    head = b.conv("head", c, f, 3)
    for i in range(spec.num_residual_blocks):
        start = b.last
        b.conv(f"block{i}.conv1", f, f, 3)
        b.act(f"block{i}.act", "relu")
        b.conv(f"block{i}.conv2", f, f, 3)
        b.add(f"block{i}.add", b.last, start)
    b.conv("body.conv", f, f, 3)
    b.add("skip.add", b.last, head)
    for i in range(doublings):
        b.conv(f"up{i}.conv", f, 4 * f, 3)
        b.d2s(f"up{i}.shuffle", 2)
    b.conv("tail", f, c, spec.final_kernel)
    return b.build()


def _wdsr(spec, rng, dtype, block):
    if spec.scale < 1:
        raise UnsupportedScaleError(f"scale must be >= 1, got {spec.scale}")
    n, f, c = spec.scale, spec.base_filters, spec.channels
    b = _GraphBuilder(spec, rng, dtype)
    b.conv("head", c, f, 3, weight_norm=True)
    for i in range(spec.num_residual_blocks):
        start = b.last
        block(b, f"block{i}", f)
        b.add(f"block{i}.add", b.last, start)
    # residual branch starts silent so the model begins as the linear skip path
    b.conv("body.conv", f, c * n * n, 3, weight_norm=True, zero_gain=True)
    body = b.d2s("body.shuffle", n)
    b.conv("skip.conv", c, c * n * n, 5, src="input", weight_norm=True)
    skip = b.d2s("skip.shuffle", n)
    b.add("out.add", body, skip)
    return b.build()


def wdsr_b_widths(spec):
    """Block conv widths ``(expanded, linear, base)`` for WDSR-B."""
    spec = spec.resolved()
    wide = spec.base_filters * spec.expansion
    return wide, int(round(wide * spec.linear_ratio)), spec.base_filters


def build_wdsr_a(spec, rng=None, dtype=np.float64):
    spec = _require(spec, "wdsr-a")
    rng = np.random.default_rng(0) if rng is None else rng
    wide = spec.base_filters * spec.expansion

    def block(b, name, f):
        b.conv(f"{name}.conv1", f, wide, 3, weight_norm=True)
        b.act(f"{name}.act", "relu")
        b.conv(f"{name}.conv2", wide, f, 3, weight_norm=True)

    return _wdsr(spec, rng, dtype, block)


def build_wdsr_b(spec, rng=None, dtype=np.float64):
    spec = _require(spec, "wdsr-b")
    rng = np.random.default_rng(0) if rng is None else rng
    wide, linear, _ = wdsr_b_widths(spec)

    def block(b, name, f):
        b.conv(f"{name}.conv1", f, wide, 1, weight_norm=True)
        b.act(f"{name}.act", "relu")
        b.conv(f"{name}.conv2", wide, linear, 1, weight_norm=True)
        b.conv(f"{name}.conv3", linear, f, 3, weight_norm=True)

    return _wdsr(spec, rng, dtype, block)


BUILDERS = {
    "sr-resnet": build_sr_resnet,
    "edsr": build_edsr,
    "wdsr-a": build_wdsr_a,
    "wdsr-b": build_wdsr_b,
}


def build_model(spec, rng=None, dtype=np.float64):
    spec = spec.resolved()
    return BUILDERS[spec.family](spec, rng=rng, dtype=dtype)
