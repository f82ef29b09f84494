import math

import numpy as np
import pytest

from diffaudio import autograd as ag
from diffaudio.autograd import Tensor
from diffaudio.config import RunConfig
from diffaudio.masking import make_clones
from diffaudio.model import Backbone, Classifier, PretrainModel
from diffaudio.training import (
    AdamState,
    _seed_for,
    adam_step,
    cosine_warmup_lr,
    decay_exempt,
    finetune_step,
    pretrain_step,
)

TINY = dict(d_model=16, n_heads=2, n_layers=2, decoder_groups=4, batch_size=2)


def frames_batch(n=2, seed=0, length=32):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((length, 128)) for _ in range(n)]


def test_zero_grads_leave_params():
    p = {"w": Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)}
    before = p["w"].data.copy()
    adam_step(p, AdamState(), lr=0.1, grads={"w": np.zeros((2, 3))})
    assert np.array_equal(p["w"].data, before)


def test_scalar_adam_oracle():
    x = Tensor(np.array([[1.0]]), requires_grad=True)
    state = AdamState()
    b1, b2, eps, lr = 0.9, 0.95, 1e-8, 0.1
    xs, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2 * xs
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        xs = xs - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        adam_step({"x": x}, state, lr, b1, b2, eps, grads={"x": 2 * x.data})
        assert x.item() == pytest.approx(xs, abs=1e-12)
    assert x.item() < 1.0


def test_weight_decay_only():
    w = Tensor(np.full((2, 2), 3.0), requires_grad=True)
    adam_step({"w": w}, AdamState(), lr=1.0, weight_decay=0.05, grads={"w": np.zeros((2, 2))})
    np.testing.assert_allclose(w.data, 0.95 * 3.0, rtol=1e-15)


def test_decay_exemptions():
    assert decay_exempt("encoder.layers.0.ln1_g", Tensor(np.ones(4)))
    assert decay_exempt("encoder.cls", Tensor(np.ones((1, 4))))
    assert decay_exempt("mask_emb", Tensor(np.ones((1, 4))))
    assert not decay_exempt("encoder.layers.0.attn.w_q", Tensor(np.ones((4, 8))))


def test_adam_shape_mismatch():
    with pytest.raises(ag.ShapeError):
        adam_step({"w": Tensor(np.zeros((2, 2)))}, AdamState(), 0.1, grads={"w": np.zeros(3)})
    state = AdamState(m={"w": np.zeros(3)}, v={"w": np.zeros(3)})
    with pytest.raises(ag.ShapeError):
        adam_step({"w": Tensor(np.zeros((2, 2)))}, state, 0.1, grads={"w": np.zeros((2, 2))})


def test_schedule_landmarks():
    assert cosine_warmup_lr(10, 50, 10, 1e-3) == 1e-3
    assert abs(cosine_warmup_lr(50, 50, 10, 1e-3)) <= 1e-15
    assert cosine_warmup_lr(30, 50, 10, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    assert cosine_warmup_lr(0, 50, 10, 1e-3) == 0.0
    with pytest.raises(ValueError):
        cosine_warmup_lr(0, 5, 10, 1e-3)
    with pytest.raises(ValueError):
        cosine_warmup_lr(51, 50, 10, 1e-3)


def test_schedule_continuous_at_junction():
    peak = 2e-3
    left = cosine_warmup_lr(9, 100, 10, peak) + peak / 10
    right = cosine_warmup_lr(10, 100, 10, peak)
    assert left == pytest.approx(peak, rel=1e-12) and right == peak
    # first cosine step is within one ramp increment of the peak
    assert peak - cosine_warmup_lr(11, 100, 10, peak) < peak / 10


def test_single_clone_step_runs():
    model = PretrainModel(RunConfig(**TINY, n_clones=1))
    br = pretrain_step(frames_batch(), model, AdamState(), 1e-3)
    assert np.isfinite(br.total)
    assert abs(br.total - (br.alpha * br.utterance + br.frame)) <= 1e-12


def test_pretrain_step_deterministic():
    runs = []
    for _ in range(2):
        model = PretrainModel(RunConfig(**TINY, n_clones=2))
        opt = AdamState()
        losses = [pretrain_step(frames_batch(seed=s), model, opt, 1e-3, step=s).total for s in range(2)]
        runs.append((losses, model.student.patch_proj.data.copy()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])


@pytest.mark.parametrize("clones", [1, 3])
def test_teacher_forwards_once_per_utterance(clones):
    model = PretrainModel(RunConfig(**TINY, n_clones=clones))
    pretrain_step(frames_batch(3), model, AdamState(), 1e-3)
    assert model.teacher_forwards == 3


def test_clone_accumulation_equals_averaged_loss_gradient():
    cfg = RunConfig(**TINY, n_clones=3)
    batch = frames_batch(2, seed=4)
    model = PretrainModel(cfg)
    pretrain_step(batch, model, AdamState(), 0.0, step=5, update=False)
    params = model.parameters()
    accumulated = {k: p.grad.copy() for k, p in params.items()}

    ag.zero_grad(params.values())
    losses = []
    for b, frames in enumerate(batch):
        tgt = model.targets(frames)
        for plan in make_clones(tgt.shape[0], cfg.mask_ratio, cfg.block_size, cfg.n_clones, _seed_for(cfg.seed, 5, b)):
            losses.append(model.clone_loss(frames, plan, tgt)[0])
    avg = ag.scale(losses[0], 1.0)
    for extra in losses[1:]:
        avg = ag.add(avg, extra)
    ag.scale(avg, 1.0 / len(losses)).backward()
    for k, p in params.items():
        np.testing.assert_allclose(accumulated[k], p.grad, atol=1e-10, rtol=0, err_msg=k)


def test_ema_follows_update():
    model = PretrainModel(RunConfig(**TINY, n_clones=1, tau=0.5))
    before = model.teacher.params["patch_proj"].data.copy()
    pretrain_step(frames_batch(), model, AdamState(), 1e-2)
    expected = 0.5 * before + 0.5 * model.student.patch_proj.data
    np.testing.assert_allclose(model.teacher.params["patch_proj"].data, expected, atol=1e-12)


def _classifier(**kw):
    return Classifier(Backbone(RunConfig(**TINY, **kw)), 4)


def test_initial_ce_is_log_four():
    clf = _classifier()
    loss = finetune_step(frames_batch(4), np.array([0, 1, 2, 3]), clf, AdamState(), 1e-3, update=False)
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_zero_finetune_ratio_uses_all_tokens(monkeypatch):
    clf = _classifier(finetune_mask_ratio=0.0)
    seen = []
    orig = clf.logits

    def spy(frames, plan=None):
        seen.append(plan)
        return orig(frames, plan)

    monkeypatch.setattr(clf, "logits", spy)
    finetune_step(frames_batch(2), np.array([0, 1]), clf, AdamState(), 1e-3, update=False)
    assert seen == [None, None]


def test_gradient_reaches_first_encoder_layer():
    clf = _classifier()
    opt = AdamState()
    labels = np.array([0, 1])
    # the head starts at zero, so encoder gradients appear once it has moved
    finetune_step(frames_batch(2), labels, clf, opt, 1e-2, step=0)
    finetune_step(frames_batch(2), labels, clf, opt, 1e-2, step=1, update=False)
    g = clf.parameters()["backbone.encoder.layers.0.attn.w_q"].grad
    assert np.linalg.norm(g) > 0


def test_multilabel_bce_path():
    clf = _classifier()
    y = np.array([[1, 0, 1, 0], [0, 1, 0, 0]], dtype=float)
    loss = finetune_step(frames_batch(2), y, clf, AdamState(), 1e-3, update=False)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_label_mismatches():
    clf = _classifier()
    with pytest.raises(ValueError):
        finetune_step(frames_batch(2), np.array([0, 1, 2]), clf, AdamState(), 1e-3)
    with pytest.raises(ValueError):
        finetune_step(frames_batch(2), np.array([0, 4]), clf, AdamState(), 1e-3)
    with pytest.raises(ValueError):
        finetune_step(frames_batch(2), np.zeros((2, 3)), clf, AdamState(), 1e-3)


def test_optimizer_bit_determinism():
    finals = []
    for _ in range(2):
        clf = _classifier()
        opt = AdamState()
        for s in range(3):
            finetune_step(frames_batch(2, seed=s), np.array([s % 4, (s + 1) % 4]), clf, opt, 1e-2, step=s)
        finals.append({k: v.data.copy() for k, v in clf.parameters().items()})
    for k in finals[0]:
        assert np.array_equal(finals[0][k], finals[1][k])
