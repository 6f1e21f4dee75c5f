"""Tests for the model variants, weight sharing, and checkpoints."""

import numpy as np
import pytest

from solarfb import models
from solarfb.models import (
    CheckpointError,
    FC_WIDTH,
    VARIANTS,
    backward,
    forward,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from solarfb.ops import (
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    global_average_pool,
    global_average_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    softmax_cross_entropy_batch,
)


def _patch(seed=0, batch=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch, 7, 16, 16)).astype(np.float32)


def test_feature_shapes_fbnet():
    params = init_model("fbnet", seed=0)
    res = forward(params, _patch(), mode="eval")
    f = res.features
    assert f.f1.shape == (1, 32, 14, 14)
    assert f.f2.shape == (1, 32, 12, 12)
    assert f.f3.shape == (1, 32, 10, 10)
    assert f.f22.shape == (1, 32, 10, 10)
    assert f.f23.shape == (1, 32, 8, 8)
    assert f.f32.shape == (1, 32, 8, 8)
    assert f.f33.shape == (1, 32, 6, 6)
    assert res.logits.shape == (1, 2)


def test_feature_shapes_inet():
    params = init_model("inet", seed=0)
    res = forward(params, _patch(), mode="eval")
    assert res.features.f3.shape == (1, 32, 10, 10)
    assert res.features.f22 is None


@pytest.mark.parametrize("variant", VARIANTS)
def test_fc_widths(variant):
    params = init_model(variant, seed=0)
    assert params.fc.weights.shape == (2, FC_WIDTH[variant])
    res = forward(params, _patch(batch=3), mode="eval")
    assert res.logits.shape == (3, 2)


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_patch_yields_bias_logits(variant):
    # all-zero input stays zero through conv (zero bias), ReLU and the
    # freshly initialized eval batch norm, so the logits are the FC bias
    params = init_model(variant, seed=1)
    params.fc.bias = np.array([0.25, -0.75], dtype=np.float32)
    res = forward(params, np.zeros((1, 7, 16, 16), dtype=np.float32), mode="eval")
    assert np.allclose(res.logits[0], [0.25, -0.75], atol=1e-6)


def test_eval_forward_is_bitwise_deterministic():
    params = init_model("fbnet", seed=2)
    x = _patch(seed=3, batch=4)
    a = forward(params, x, mode="eval").logits
    b = forward(params, x, mode="eval").logits
    assert np.array_equal(a, b)


def test_forward_rejects_wrong_patch_shape():
    params = init_model("inet", seed=0)
    with pytest.raises(ValueError, match="7x16x16"):
        forward(params, np.zeros((1, 7, 8, 8), dtype=np.float32))


def test_conv2_sharing_is_by_object():
    params = init_model("fbnet", seed=4)
    x = _patch(seed=5)
    before = forward(params, x, mode="eval")
    params.conv2.kernels[:] *= 2.0
    after = forward(params, x, mode="eval")
    # every conv2 application site sees the mutation
    assert not np.allclose(before.features.f2, after.features.f2)
    assert not np.allclose(before.features.f22, after.features.f22)
    assert not np.allclose(before.features.f32, after.features.f32)


def _fbnet_copies_grads(params, x, labels):
    """FB-Net forward/backward with independent per-site conv/bn copies.

    The gradient of a shared parameter equals the sum of the gradients of
    its independent copies; this builds that sum without any weight
    sharing in the graph.
    """
    mode = "eval"

    def stage(inp, conv, bn):
        y, cc = conv2d(inp, conv)
        y, rm = relu(y)
        y, bc = batchnorm(y, bn, mode)
        return y, (cc, rm, bc)

    def stage_back(cache, dy):
        cc, rm, bc = cache
        d, _, _ = batchnorm_backward(bc, dy)
        d = relu_backward(rm, d)
        return conv2d_backward(cc, d)

    f1, s1 = stage(x, params.conv1, params.bn1)
    f2, s2 = stage(f1, params.conv2, params.bn2)
    f3, s3 = stage(f2, params.conv3, params.bn3)
    f22, s22 = stage(f2, params.conv2, params.bn2)
    f23, s23 = stage(f22, params.conv3, params.bn3)
    f32, s32 = stage(f3, params.conv2, params.bn2)
    f33, s33 = stage(f32, params.conv3, params.bn3)
    pooled, gcs = [], []
    for f in (f3, f23, f33):
        g, gc = global_average_pool(f)
        pooled.append(g)
        gcs.append(gc)
    logits, fcache = linear(np.concatenate(pooled, axis=1), params.fc)
    _, dlogits = softmax_cross_entropy_batch(logits, labels)

    dhead, _, _ = linear_backward(fcache, dlogits)
    dbr = [global_average_pool_backward(gc, dhead[:, i * 32:(i + 1) * 32])
           for i, gc in enumerate(gcs)]
    d_f32, dk33, _ = stage_back(s33, dbr[2])
    d_f3_fb, dk32, _ = stage_back(s32, d_f32)
    d_f22, dk23, _ = stage_back(s23, dbr[1])
    d_f2_fb, dk22, _ = stage_back(s22, d_f22)
    d_f2, dk3, _ = stage_back(s3, dbr[0] + d_f3_fb)
    _, dk2, _ = stage_back(s2, d_f2 + d_f2_fb)
    return logits, dk2 + dk22 + dk32, dk3 + dk23 + dk33


def test_shared_conv_grads_equal_sum_over_sites():
    params = init_model("fbnet", seed=6)
    x = _patch(seed=7, batch=2)
    labels = np.array([1, 0])
    res = forward(params, x, mode="eval")
    _, dlogits = softmax_cross_entropy_batch(res.logits, labels)
    grads, _, _ = backward(params, res, dlogits)
    ref_logits, dk2_sum, dk3_sum = _fbnet_copies_grads(params, x, labels)
    assert np.allclose(res.logits, ref_logits, atol=1e-6)
    assert np.allclose(grads["conv2.kernels"], dk2_sum, atol=1e-5)
    assert np.allclose(grads["conv3.kernels"], dk3_sum, atol=1e-5)


def test_backward_feature_grads_keys():
    params = init_model("fbnet", seed=8)
    res = forward(params, _patch(seed=9), mode="eval")
    dlogits = np.array([[1.0, -1.0]], dtype=np.float32)
    _, fgrads, _ = backward(params, res, dlogits)
    assert set(fgrads) == {"f3", "f23", "f33"}
    assert fgrads["f3"].shape == (1, 32, 10, 10)
    assert fgrads["f33"].shape == (1, 32, 6, 6)

    params = init_model("inet_gap", seed=8)
    res = forward(params, _patch(seed=9), mode="eval")
    _, fgrads, _ = backward(params, res, dlogits)
    assert set(fgrads) == {"f3"}


def test_predict_threshold_tie_is_positive():
    label, prob = predict(np.array([0.0, 0.0]), threshold=0.5)
    assert prob == 0.5
    assert label == 1
    labels, probs = predict(np.array([[3.0, 0.0], [0.0, 3.0]]), threshold=0.5)
    assert list(labels) == [0, 1]
    with pytest.raises(ValueError, match="threshold"):
        predict(np.array([0.0, 0.0]), threshold=1.5)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    params = init_model("fbnet", seed=10)
    params.bn2.running_mean += 0.125
    path = tmp_path / "model.fbn"
    save_checkpoint(params, path, meta={"note": "roundtrip"})
    loaded, meta = load_checkpoint(path, with_meta=True)
    assert meta == {"note": "roundtrip"}
    assert loaded.variant == "fbnet"
    for name, arr in params.state_tensors().items():
        assert np.array_equal(arr, loaded.state_tensors()[name]), name
    # saving the loaded model reproduces the file byte for byte
    path2 = tmp_path / "model2.fbn"
    save_checkpoint(loaded, path2, meta={"note": "roundtrip"})
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_stores_shared_convs_once(tmp_path):
    params = init_model("fbnet", seed=11)
    path = tmp_path / "model.fbn"
    save_checkpoint(params, path)
    import json
    with open(path, "rb") as fh:
        fh.readline()  # magic
        header = json.loads(fh.readline())
    names = [t["name"] for t in header["tensors"]]
    assert names.count("conv2.kernels") == 1
    assert names.count("conv3.kernels") == 1
    assert len(names) == 20


def test_checkpoint_error_cases(tmp_path):
    params = init_model("inet", seed=12)
    path = tmp_path / "model.fbn"
    save_checkpoint(params, path)

    with pytest.raises(CheckpointError, match="magic"):
        bad = tmp_path / "bad_magic.fbn"
        bad.write_bytes(b"NOTFBN\n" + path.read_bytes()[7:])
        load_checkpoint(bad)

    with pytest.raises(CheckpointError, match="variant"):
        load_checkpoint(path, expect_variant="fbnet")

    with pytest.raises(CheckpointError, match="truncated"):
        trunc = tmp_path / "trunc.fbn"
        trunc.write_bytes(path.read_bytes()[:-100])
        load_checkpoint(trunc)

    with pytest.raises(CheckpointError, match="format version"):
        blob = path.read_bytes()
        head_end = blob.index(b"\n", 7) + 1
        import json
        header = json.loads(blob[7:head_end])
        header["format_version"] = 99
        ver = tmp_path / "ver.fbn"
        ver.write_bytes(b"FBNET1\n" + json.dumps(header).encode() + b"\n"
                        + blob[head_end:])
        load_checkpoint(ver)


def test_astype_and_copy_are_independent():
    params = init_model("inet_gap", seed=13)
    p64 = params.astype(np.float64)
    assert p64.conv1.kernels.dtype == np.float64
    p64.conv1.kernels[0, 0, 0, 0] = 99.0
    assert params.conv1.kernels[0, 0, 0, 0] != 99.0
    dup = params.copy()
    dup.fc.bias[0] = 5.0
    assert params.fc.bias[0] != 5.0


def test_init_model_rejects_unknown_variant():
    with pytest.raises(ValueError, match="variant"):
        init_model("resnet")
