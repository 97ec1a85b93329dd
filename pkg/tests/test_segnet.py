import numpy as np
import pytest

from scribseg import autodiff as ad
from scribseg import segnet
from scribseg.errors import ConfigurationError
from scribseg.util import UNKNOWN

CFG = segnet.NetConfig(depth=2, base_channels=4, num_labels=3, dropout_p=0.5,
                       dropout_blocks=3)


def small_params(seed=0):
    return segnet.init_params(CFG, np.random.default_rng(seed))


def test_probmap_rows_sum_to_one():
    params = small_params()
    image = np.random.default_rng(1).random((12, 12)).astype(np.float32)
    _, probs = segnet.forward(params, CFG, image)
    assert probs.shape == (3, 12, 12)
    assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-5


def test_forward_deterministic_without_dropout():
    params = small_params()
    image = np.random.default_rng(2).random((8, 8)).astype(np.float32)
    l1, p1 = segnet.forward(params, CFG, image)
    l2, p2 = segnet.forward(params, CFG, image)
    assert l1.tobytes() == l2.tobytes() and p1.tobytes() == p2.tobytes()


def test_forward_dropout_seeds_differ():
    params = small_params()
    image = np.random.default_rng(3).random((8, 8)).astype(np.float32)
    _, p1 = segnet.forward(params, CFG, image, dropout_enabled=True,
                           rng=np.random.default_rng(10))
    _, p2 = segnet.forward(params, CFG, image, dropout_enabled=True,
                           rng=np.random.default_rng(11))
    assert np.any(p1 != p2)


def test_output_dims_follow_input_dims():
    params = segnet.init_params(
        segnet.NetConfig(depth=3, base_channels=2, num_labels=2, dropout_blocks=5),
        np.random.default_rng(0))
    image = np.random.default_rng(4).random((13, 10)).astype(np.float32)
    cfg = segnet.NetConfig(depth=3, base_channels=2, num_labels=2, dropout_blocks=5)
    _, probs = segnet.forward(params, cfg, image)
    assert probs.shape == (2, 13, 10)


def test_masked_ce_uniform_logits():
    tape = ad.Tape()
    logits = tape.leaf(np.zeros((1, 2, 1, 1)))
    target = np.zeros((1, 1, 1), dtype=np.uint8)
    loss = segnet.masked_cross_entropy(logits, target)
    assert abs(float(loss.data) - np.log(2.0)) < 1e-12


def test_masked_ce_margin_drives_loss_to_zero():
    losses = []
    for margin in (2.0, 8.0, 20.0):
        tape = ad.Tape()
        arr = np.zeros((1, 2, 1, 1))
        arr[0, 0] = margin
        loss = segnet.masked_cross_entropy(tape.leaf(arr),
                                           np.zeros((1, 1, 1), dtype=np.uint8))
        losses.append(float(loss.data))
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-8


def test_masked_ce_all_unknown():
    tape = ad.Tape()
    logits = tape.leaf(np.random.default_rng(0).normal(size=(1, 3, 2, 2)))
    target = np.full((1, 2, 2), UNKNOWN, dtype=np.uint8)
    loss = segnet.masked_cross_entropy(logits, target)
    assert float(loss.data) == 0.0
    grads = ad.backward(tape, loss)
    assert not grads[logits].any()


def test_masked_ce_masking_invariance():
    rng = np.random.default_rng(5)
    base = rng.normal(size=(1, 3, 4, 4))
    target = rng.integers(0, 3, size=(1, 4, 4)).astype(np.uint8)
    target[0, 1, 1] = UNKNOWN
    target[0, 2, 3] = UNKNOWN

    def run(arr):
        tape = ad.Tape()
        logits = tape.leaf(arr)
        loss = segnet.masked_cross_entropy(logits, target)
        grads = ad.backward(tape, loss)
        return loss.data.tobytes(), grads[logits].tobytes()

    perturbed = base.copy()
    perturbed[0, :, 1, 1] += rng.normal(size=3)
    perturbed[0, :, 2, 3] -= 7.0
    assert run(base) == run(perturbed)


def test_masked_ce_gradient_fd():
    rng = np.random.default_rng(6)
    arr = rng.normal(size=(1, 3, 4, 4))
    target = rng.integers(0, 3, size=(1, 4, 4)).astype(np.uint8)
    target[0, 0, 0] = UNKNOWN
    tape = ad.Tape()
    logits = tape.leaf(arr)
    loss = segnet.masked_cross_entropy(logits, target)
    ana = ad.backward(tape, loss)[logits]
    eps = 1e-5
    num = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        for sign in (1, -1):
            a = arr.copy()
            a[idx] += sign * eps
            t2 = ad.Tape()
            val = float(segnet.masked_cross_entropy(t2.leaf(a), target).data)
            num[idx] += sign * val / (2 * eps)
    err = np.abs(ana - num) / np.maximum(1.0, np.abs(ana))
    assert err.max() < 1e-5


def test_lr_schedule_exact():
    tcfg = segnet.TrainConfig()
    assert segnet.lr_at(tcfg, 0) == 0.001
    assert segnet.lr_at(tcfg, 2999) == 0.001
    assert abs(segnet.lr_at(tcfg, 3000) - 0.0009) < 1e-15
    assert abs(segnet.lr_at(tcfg, 6000) - 0.00081) < 1e-15
    assert abs(segnet.lr_at(tcfg, 9000) - 0.001 * 0.9 ** 3) < 1e-15


def test_adam_zero_gradient_keeps_params():
    params = small_params()
    before = {k: v.copy() for k, v in params.tensors.items()}
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for _ in range(3):
        segnet.adam_step(params, grads, segnet.TrainConfig())
    for k in before:
        assert np.array_equal(params.tensors[k], before[k])
    assert params.t == 3


def test_adam_first_step_magnitude():
    # one step with g=1 on a scalar: bias correction makes the update ~ lr0
    params = segnet.NetParams({"w": np.array([0.0], dtype=np.float32)})
    segnet.adam_step(params, {"w": np.array([1.0], dtype=np.float32)},
                     segnet.TrainConfig())
    assert abs(-params.tensors["w"][0] - 0.001) < 1e-8


def toy_dataset(n=1, size=8, seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        image = rng.random((size, size)).astype(np.float32)
        target = (image > 0.5).astype(np.uint8)
        data.append((image, target))
    return data


def test_train_zero_iters_is_identity():
    params = small_params()
    before = params.blob()
    tcfg = segnet.TrainConfig(iters_per_recursion=0)
    losses = segnet.train_m_step(params, CFG, tcfg, toy_dataset(),
                                 np.random.default_rng(0))
    assert losses == []
    assert params.blob() == before


def test_train_loss_decreases():
    cfg = segnet.NetConfig(depth=2, base_channels=4, num_labels=2, dropout_p=0.0,
                           dropout_blocks=0)
    params = segnet.init_params(cfg, np.random.default_rng(1))
    tcfg = segnet.TrainConfig(iters_per_recursion=500, batch_size=1)
    losses = segnet.train_m_step(params, cfg, tcfg, toy_dataset(),
                                 np.random.default_rng(2))
    assert np.mean(losses[-10:]) < losses[0]


def test_train_warm_start_continues():
    params = small_params()
    data = toy_dataset(3, seed=3)
    tcfg = segnet.TrainConfig(iters_per_recursion=5)
    segnet.train_m_step(params, CFG, tcfg, data, np.random.default_rng(0))
    t_after_first = params.t
    segnet.train_m_step(params, CFG, tcfg, data, np.random.default_rng(1))
    assert params.t == t_after_first + 5  # same storage, step counter kept


def test_dropout_blocks_validation():
    with pytest.raises(ConfigurationError):
        segnet.NetConfig(depth=2, dropout_blocks=4).validate()


def test_checkpoint_roundtrip(tmp_path):
    params = small_params(seed=9)
    params.t = 123
    path = tmp_path / "net.ckpt"
    segnet.save_checkpoint(path, params, CFG)
    loaded, cfg, rnn = segnet.load_checkpoint(path)
    assert rnn is None
    assert cfg == CFG
    assert loaded.t == 123
    assert loaded.blob() == params.blob()
