import time

import numpy as np
import pytest

from rocksr.gradcheck import max_relative_error
from rocksr.models import (FAMILIES, ModelSpec, UnsupportedScaleError, build_model, count_parameters,
                           forward, wdsr_b_widths)
from rocksr.tensor import DimensionError, UninitializedStatisticsError


# ---------------------------------------------------------------- oracle
#
# Written from the architecture description alone, without looking at the
# builders: each layer is (kind, in, out, k) and parameters are summed by
# shape. Weight-normed convs carry v (out*in*k*k) plus g (out) plus bias.

def layer_table(family, blocks, scale=4, c=1):
    L = []
    if family == "sr-resnet":
        f = 64
        L += [("conv", c, f, 9), ("prelu", f)]
        for _ in range(blocks):
            L += [("conv", f, f, 3), ("bn", f), ("prelu", f), ("conv", f, f, 3), ("bn", f)]
        L += [("conv", f, f, 3), ("bn", f)]
        for _ in range(int(np.log2(scale))):
            L += [("conv", f, 4 * f, 3), ("prelu", f)]
        L += [("conv", f, c, 9)]
    elif family == "edsr":
        f = 64
        L += [("conv", c, f, 3)]
        for _ in range(blocks):
            L += [("conv", f, f, 3), ("conv", f, f, 3)]
        L += [("conv", f, f, 3)]
        for _ in range(int(np.log2(scale))):
            L += [("conv", f, 4 * f, 3)]
        L += [("conv", f, c, 3)]
    elif family == "wdsr-a":
        f = 32
        L += [("wconv", c, f, 3)]
        for _ in range(blocks):
            L += [("wconv", f, 128, 3), ("wconv", 128, f, 3)]
        L += [("wconv", f, c * scale * scale, 3), ("wconv", c, c * scale * scale, 5)]
    elif family == "wdsr-b":
        f = 32
        L += [("wconv", c, f, 3)]
        for _ in range(blocks):
            L += [("wconv", f, 192, 1), ("wconv", 192, 154, 1), ("wconv", 154, f, 3)]
        L += [("wconv", f, c * scale * scale, 3), ("wconv", c, c * scale * scale, 5)]
    return L


def oracle_count(family, blocks, scale=4, c=1):
    total = 0
    for layer in layer_table(family, blocks, scale, c):
        kind = layer[0]
        if kind == "conv":
            _, i, o, k = layer
            total += o * i * k * k + o
        elif kind == "wconv":
            _, i, o, k = layer
            total += o * i * k * k + o + o
        elif kind == "prelu":
            total += layer[1]
        elif kind == "bn":
            total += 2 * layer[1]
    return total


AUDITED = [("sr-resnet", 16), ("edsr", 8), ("edsr", 16), ("wdsr-a", 8), ("wdsr-b", 8)]


@pytest.mark.parametrize("family,blocks", AUDITED)
def test_parameter_count_matches_oracle(family, blocks):
    m = build_model(ModelSpec(family, blocks))
    assert count_parameters(m) == oracle_count(family, blocks)


def test_parameter_count_hand_values():
    # EDSR-8: head 640, 17 convs 64->64 at 36928, two ups at 147712, tail 577
    assert oracle_count("edsr", 8) == 640 + 17 * 36928 + 2 * 147712 + 577 == 924417
    assert count_parameters(build_model(ModelSpec("edsr", 8))) == 924417
    assert count_parameters(build_model(ModelSpec("wdsr-a", 8))) == 597808
    assert count_parameters(build_model(ModelSpec("wdsr-b", 8))) == 651984
    assert count_parameters(build_model(ModelSpec("sr-resnet", 16))) == 1529921


def test_parameter_ordering_between_families():
    edsr = count_parameters(build_model(ModelSpec("edsr", 8)))
    wa = count_parameters(build_model(ModelSpec("wdsr-a", 8)))
    wb = count_parameters(build_model(ModelSpec("wdsr-b", 8)))
    assert wa < edsr
    # the low-rank 1x1 pair makes WDSR-B blocks larger than WDSR-A blocks here
    assert wb > wa


def test_oracle_layer_shapes_match_graph():
    for family, blocks in AUDITED:
        m = build_model(ModelSpec(family, blocks))
        got = [(n.attrs["in"], n.attrs["out"], n.attrs["k"]) for n in m.conv_nodes()]
        want = [l[1:] for l in layer_table(family, blocks) if l[0] in ("conv", "wconv")]
        assert sorted(got) == sorted(want)


# ---------------------------------------------------------------- structure

def expected_ops(family, blocks, scale=4):
    if family == "sr-resnet":
        ops = ["conv", "act"] + ["conv", "bn", "act", "conv", "bn", "add"] * blocks
        ops += ["conv", "bn", "add"] + ["conv", "d2s", "act"] * int(np.log2(scale)) + ["conv"]
    elif family == "edsr":
        ops = ["conv"] + ["conv", "act", "conv", "add"] * blocks
        ops += ["conv", "add"] + ["conv", "d2s"] * int(np.log2(scale)) + ["conv"]
    elif family == "wdsr-a":
        ops = ["conv"] + ["conv", "act", "conv", "add"] * blocks + ["conv", "d2s", "conv", "d2s", "add"]
    else:
        ops = ["conv"] + ["conv", "act", "conv", "conv", "add"] * blocks + ["conv", "d2s", "conv", "d2s", "add"]
    return ops


@pytest.mark.parametrize("family,blocks", AUDITED + [("sr-resnet", 0), ("wdsr-b", 1)])
def test_node_sequence(family, blocks):
    assert build_model(ModelSpec(family, blocks)).node_ops() == expected_ops(family, blocks)


def test_batch_norm_counts():
    assert build_model(ModelSpec("sr-resnet", 16)).node_ops().count("bn") == 2 * 16 + 1
    for family, blocks in [("edsr", 8), ("edsr", 16), ("wdsr-a", 8), ("wdsr-b", 8)]:
        assert "bn" not in build_model(ModelSpec(family, blocks)).node_ops()


def test_wdsr_structure():
    for family in ("wdsr-a", "wdsr-b"):
        m = build_model(ModelSpec(family, 3))
        assert all(n.attrs["weight_norm"] for n in m.conv_nodes())
        for n in m.nodes:
            if n.op == "act":
                assert n.name.startswith("block")
        skip = next(n for n in m.nodes if n.name == "skip.conv")
        assert skip.inputs == ("input",) and skip.attrs["k"] == 5 and skip.attrs["out"] == 16
        assert m.nodes[-1].op == "add"
    rgb = build_model(ModelSpec("wdsr-a", 1, channels=3))
    assert next(n for n in rgb.nodes if n.name == "skip.conv").attrs["out"] == 48


def test_wdsr_b_widths():
    assert wdsr_b_widths(ModelSpec("wdsr-b", 8)) == (192, 154, 32)
    m = build_model(ModelSpec("wdsr-b", 1))
    assert [n.attrs["out"] for n in m.conv_nodes() if n.name.startswith("block0")] == [192, 154, 32]


def test_single_skip_connection():
    for family in ("sr-resnet", "edsr"):
        m = build_model(ModelSpec(family, 2))
        skips = [n for n in m.nodes if n.op == "add" and not n.name.startswith("block")]
        assert len(skips) == 1
        head = "head.act" if family == "sr-resnet" else "head"
        assert head in skips[0].inputs


def test_edsr_block_is_sr_resnet_block_without_bn():
    sr = build_model(ModelSpec("sr-resnet", 1)).nodes
    ed = build_model(ModelSpec("edsr", 1)).nodes
    blk = lambda nodes: [n.op for n in nodes if n.name.startswith("block0") and n.op != "bn"]
    assert blk(sr) == blk(ed)


def test_zero_blocks_graph_valid():
    m = build_model(ModelSpec("sr-resnet", 0))
    m.forward(np.random.default_rng(0).random((2, 1, 6, 6)), training=True)
    assert m.forward(np.zeros((1, 1, 5, 5))).shape == (1, 1, 20, 20)


def test_unsupported_scale():
    with pytest.raises(UnsupportedScaleError):
        build_model(ModelSpec("edsr", 1, scale=3))
    with pytest.raises(UnsupportedScaleError):
        build_model(ModelSpec("sr-resnet", 1, scale=6))
    m = build_model(ModelSpec("wdsr-b", 1, scale=3))
    assert m.forward(np.zeros((1, 1, 4, 5))).shape == (1, 1, 12, 15)


def test_family_aliases():
    assert ModelSpec("WDSR_B", 2).resolved().family == "wdsr-b"
    assert ModelSpec("SRResnet", 2).resolved().family == "sr-resnet"
    with pytest.raises(ValueError):
        ModelSpec("srgan", 2).resolved()


# ---------------------------------------------------------------- forward

@pytest.mark.parametrize("family", FAMILIES)
def test_shape_contract_48(family):
    m = build_model(ModelSpec(family, 1), rng=np.random.default_rng(0))
    x = np.random.default_rng(1).random((1, 1, 48, 48))
    if family == "sr-resnet":
        m.forward(x, training=True)
    assert forward(m, x).shape == (1, 1, 192, 192)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("hw", [(1, 1), (3, 7), (10, 4)])
def test_any_size(family, hw):
    m = build_model(ModelSpec(family, 1), rng=np.random.default_rng(0))
    if family == "sr-resnet":
        m.forward(np.random.default_rng(0).random((2, 1, 4, 4)), training=True)
    assert m.forward(np.zeros((1, 1) + hw)).shape == (1, 1, 4 * hw[0], 4 * hw[1])


def test_full_size_inference():
    m = build_model(ModelSpec("wdsr-b", 1), dtype=np.float32)
    out = m.upscale(np.random.default_rng(0).random((200, 200)))
    assert out.shape == (800, 800) and 0 <= out.min() and out.max() <= 1


@pytest.mark.parametrize("family", ["wdsr-a", "wdsr-b"])
def test_all_zero_weights_give_zero_output(family):
    m = build_model(ModelSpec(family, 2))
    for name, p in m.params.items():
        if name.endswith(".v"):
            continue  # direction must stay non-degenerate; zero g gives zero weights
        p.data[...] = 0
    assert not m.forward(np.random.default_rng(0).random((1, 1, 6, 6))).any()


def test_sr_resnet_needs_statistics():
    m = build_model(ModelSpec("sr-resnet", 1))
    with pytest.raises(UninitializedStatisticsError):
        m.forward(np.zeros((1, 1, 4, 4)))


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        build_model(ModelSpec("edsr", 1)).forward(np.zeros((1, 3, 4, 4)))


def test_tiled_inference_matches_whole():
    m = build_model(ModelSpec("wdsr-b", 2), rng=np.random.default_rng(3))
    rng = np.random.default_rng(4)
    for name, p in m.params.items():
        if name.endswith(".g"):
            p.data[...] = rng.uniform(0.2, 1.0, size=p.data.shape)
    img = rng.random((37, 29))
    whole = m.upscale(img, tile=None, clamp=False)
    tiled = m.upscale(img, tile=8, clamp=False)
    np.testing.assert_allclose(tiled, whole, rtol=0, atol=1e-12)


def test_inference_is_deterministic():
    m = build_model(ModelSpec("edsr", 2), rng=np.random.default_rng(0))
    x = np.random.default_rng(1).random((1, 1, 9, 9))
    np.testing.assert_array_equal(m.forward(x), m.forward(x))


# ---------------------------------------------------------------- gradients

def randomise(model, rng):
    """Move off the init so every parameter influences the loss."""
    for name, p in model.params.items():
        if name.endswith(".g"):
            p.data[...] = rng.uniform(0.3, 1.0, size=p.data.shape)
        elif name.endswith(".bias") or name.endswith(".beta"):
            p.data[...] = rng.normal(0, 0.05, size=p.data.shape)
        elif name.endswith(".gamma"):
            p.data[...] = rng.uniform(0.7, 1.3, size=p.data.shape)
        elif name.endswith(".alpha"):
            p.data[...] = rng.uniform(0.1, 0.4, size=p.data.shape)


def end_to_end_check(family, seed=0, n_params=24, h=1e-5):
    spec = ModelSpec(family, 1, base_filters=8, expansion=2 if family.startswith("wdsr") else None)
    rng = np.random.default_rng(seed)
    m = build_model(spec, rng=rng, dtype=np.float64)
    randomise(m, rng)
    x = rng.random((2, 1, 8, 8))
    y = rng.random((2, 1, 32, 32))

    def loss():
        d = m.forward(x, training=True) - y
        return float(np.mean(d * d))

    m.zero_grad()
    d = m.forward(x, training=True) - y
    dx = m.backward(d * (2.0 / d.size))

    names = sorted(m.params)
    picks = []
    for k in range(n_params):
        name = names[k % len(names)] if k < len(names) else names[int(rng.integers(len(names)))]
        picks.append((name, int(rng.integers(m.params[name].data.size))))
    analytic, numeric = [], []
    for name, i in picks:
        p = m.params[name]
        flat = p.data.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        fp = loss()
        flat[i] = old - h
        fm = loss()
        flat[i] = old
        numeric.append((fp - fm) / (2 * h))
        analytic.append(p.grad.reshape(-1)[i])
    for idx in rng.integers(x.size, size=4):
        flat = x.reshape(-1)
        old = flat[idx]
        flat[idx] = old + h
        fp = loss()
        flat[idx] = old - h
        fm = loss()
        flat[idx] = old
        numeric.append((fp - fm) / (2 * h))
        analytic.append(dx.reshape(-1)[idx])
    return max_relative_error(np.array(analytic), np.array(numeric), floor=1e-7), len(picks)


@pytest.mark.parametrize("family", FAMILIES)
def test_end_to_end_gradients(family):
    err, n = end_to_end_check(family)
    assert n >= 20
    assert err < 1e-3


def test_wdsr_b_faster_than_edsr():
    def iteration_time(family):
        m = build_model(ModelSpec(family, 8), rng=np.random.default_rng(0), dtype=np.float32)
        rng = np.random.default_rng(1)
        x = rng.random((4, 1, 24, 24)).astype(np.float32)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            out = m.forward(x, training=True)
            m.zero_grad()
            m.backward(np.ones_like(out) / out.size)
            best = min(best, time.perf_counter() - t0)
        return best

    assert iteration_time("wdsr-b") < iteration_time("edsr")
