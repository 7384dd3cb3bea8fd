import io

import numpy as np
import pytest
from conftest import TINY_CNN

from rdinet.attacks import AttackBudget
from rdinet.data import synth_blobs
from rdinet.network import MINI_RESNET, SMALLCNN, build_network, forward_all_exits, params_equal
from rdinet.training import (
    MNIST_PGD40,
    MNIST_TRAIN,
    DefenseScheme,
    TrainConfig,
    TrainingError,
    accuracy_per_exit,
    rdi_loss,
    train,
)


def np_xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(3, 40, (8, 8, 1), separation=1.0, seed=2, sigma=0.05)


def head_only(net, k):
    """Parameters used by exit k and by no other exit."""
    others = set().union(*(d for j, d in enumerate(net.exit_dependencies) if j != k))
    return net.exit_dependencies[k] - others


def test_uniform_logits_loss_is_three_times_a_plus_b():
    net = build_network(SMALLCNN, 0)
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k])
    x = np.random.default_rng(0).uniform(0, 1, (4, 28, 28, 1))
    y = np.array([0, 3, 5, 9])
    loss, _ = rdi_loss(net, x, np.clip(x + 0.1, 0, 1), y, (1, 1, 1), with_grads=False)
    a = b = np.log(10.0)
    assert loss == pytest.approx(3 * (a + b), rel=1e-12)


def test_loss_matches_numpy_reference(tiny_net, tiny_data):
    x, y = tiny_data
    x_adv = np.clip(x + np.random.default_rng(1).uniform(-0.1, 0.1, x.shape), 0, 1)
    w = (0.5, 1.0, 0.0, 2.0)
    clean, adv = forward_all_exits(tiny_net, x), forward_all_exits(tiny_net, x_adv)
    ref = sum(wi * (np_xent(c, y).mean() + np_xent(a, y).mean()) for wi, c, a in zip(w, clean, adv))
    loss, _ = rdi_loss(tiny_net, x, x_adv, y, w)
    assert loss == pytest.approx(ref, rel=1e-12)
    std, _ = rdi_loss(tiny_net, x, None, y, w)
    assert std == pytest.approx(sum(wi * np_xent(c, y).mean() for wi, c in zip(w, clean)), rel=1e-12)


def test_weight_count_checked(tiny_net, tiny_data):
    x, y = tiny_data
    with pytest.raises(ValueError):
        rdi_loss(tiny_net, x, None, y, (1, 1))


def test_dead_branches_get_no_gradient(tiny_net, tiny_data):
    x, y = tiny_data
    _, grads = rdi_loss(tiny_net, x, x, y, (0, 0, 0, 1))
    for k in (0, 1, 2):
        for p in head_only(tiny_net, k):
            assert not grads[p].any(), p


@pytest.mark.parametrize("j", range(4))
def test_head_parameters_only_see_their_own_exit(tiny_net, tiny_data, j):
    x, y = tiny_data
    w = [0.0] * 4
    w[j] = 1.0
    _, grads = rdi_loss(tiny_net, x, None, y, w)
    for i in range(4):
        if i == j:
            continue
        for p in head_only(tiny_net, i):
            assert not grads[p].any()


def test_shared_gradients_are_summed_over_exits(tiny_net, tiny_data):
    x, y = tiny_data
    _, total = rdi_loss(tiny_net, x, None, y, (1, 1, 1, 1))
    parts = [rdi_loss(tiny_net, x, None, y, np.eye(4)[k])[1] for k in range(4)]
    for p in total:
        assert np.allclose(total[p], sum(g[p] for g in parts), rtol=1e-10, atol=1e-13)


def test_zero_learning_rate_keeps_parameters(tiny_net, blobs):
    cfg = TrainConfig((1, 1, 1, 1), lr=0.0, steps=1, batch_size=8, milestones=())
    scheme = DefenseScheme("average", AttackBudget(0.1, 0.05, 2))
    trained, hist = train(tiny_net, blobs.images, blobs.labels, scheme, cfg)
    assert params_equal(trained, tiny_net)
    assert len(hist.loss) == 1


def test_standard_training_separates_blobs(blobs):
    ref = nearest_centroid_accuracy(blobs)
    assert ref == 1.0  # convex reference classifier separates the set
    net = build_network(TINY_CNN, 0)
    cfg = TrainConfig((1, 1, 1, 1), lr=0.05, steps=500, batch_size=16, milestones=())
    trained, _ = train(net, blobs.images, blobs.labels, DefenseScheme("standard"), cfg)
    acc = accuracy_per_exit(trained, blobs.images, blobs.labels)
    assert min(acc) > 0.95, acc


def nearest_centroid_accuracy(ds):
    x = ds.images.reshape(len(ds), -1)
    cents = np.stack([x[ds.labels == c].mean(0) for c in range(ds.num_classes)])
    pred = np.argmin(((x[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    return float(np.mean(pred == ds.labels))


@pytest.mark.parametrize("kind", ["standard", "main_branch", "average", "max_average"])
def test_smoothed_loss_decreases(kind, blobs):
    net = build_network(TINY_CNN, 1)
    scheme = DefenseScheme(kind, None if kind == "standard" else AttackBudget(0.1, 0.02, 3))
    cfg = TrainConfig((1, 1, 1, 1), lr=0.02, steps=220, batch_size=8, milestones=((200, 0.1),))
    _, hist = train(net, blobs.images, blobs.labels, scheme, cfg)
    sm = hist.smoothed(100)
    assert sm[-1] < sm[0]


def test_mini_resnet_trains_on_synthetic_images():
    ds = synth_blobs(10, 4, (32, 32, 3), separation=2.0, seed=0)
    net = build_network(MINI_RESNET, 0)
    cfg = TrainConfig((1, 1, 1), lr=0.02, steps=60, batch_size=4, milestones=())
    _, hist = train(net, ds.images, ds.labels, DefenseScheme("standard"), cfg)
    sm = hist.smoothed(30)
    assert sm[-1] < sm[0]


def test_training_is_deterministic(tiny_net, blobs):
    scheme = DefenseScheme("max_average", AttackBudget(0.1, 0.03, 2, random_start=True))
    cfg = TrainConfig((1, 1, 1, 1), lr=0.02, steps=6, batch_size=8, seed=3)
    a, _ = train(tiny_net, blobs.images, blobs.labels, scheme, cfg)
    b, _ = train(tiny_net, blobs.images, blobs.labels, scheme, cfg)
    assert params_equal(a, b)


def test_metrics_log_lines(tiny_net, blobs):
    buf = io.StringIO()
    cfg = TrainConfig((1, 1, 1, 1), lr=0.01, steps=5, batch_size=8, log_every=2)
    train(tiny_net, blobs.images, blobs.labels, DefenseScheme("standard"), cfg, metrics=buf)
    lines = buf.getvalue().splitlines()
    assert [l.split()[0] for l in lines] == ["step=0", "step=2", "step=4"]
    assert all("scheme=standard" in l and "loss=" in l and "lr=0.01" in l for l in lines)


def test_non_finite_loss_aborts_with_step_and_scheme(tiny_net, blobs):
    net = tiny_net.copy()
    net.params["bb5.w"] = np.full_like(net.params["bb5.w"], 1e308)
    cfg = TrainConfig((1, 1, 1, 1), lr=0.01, steps=3, batch_size=8)
    with pytest.raises(TrainingError, match=r"at step \d+ \(scheme standard\)"):
        with np.errstate(all="ignore"):
            train(net, blobs.images, blobs.labels, DefenseScheme("standard"), cfg)


def test_scheme_budget_rules():
    with pytest.raises(ValueError):
        DefenseScheme("standard", AttackBudget(0.3, 0.01, 1))
    with pytest.raises(ValueError):
        DefenseScheme("average")
    with pytest.raises(ValueError):
        TrainConfig((0, 0, 0))


def test_learning_rate_schedule_and_mnist_defaults():
    assert MNIST_TRAIN.steps == 13100 and MNIST_TRAIN.batch_size == 256
    assert MNIST_TRAIN.lr_at(0) == 0.033
    assert MNIST_TRAIN.lr_at(12000) == pytest.approx(0.0033)
    assert MNIST_TRAIN.lr_at(12900) == pytest.approx(0.00033)
    assert (MNIST_PGD40.epsilon, MNIST_PGD40.step_size, MNIST_PGD40.steps) == (0.3, 0.01, 40)
