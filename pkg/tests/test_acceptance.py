"""End-to-end acceptance checks, one test per criterion.

Each test prints a single summary line on success; the expected values are
computed inside the test from first principles (direct formulas, exhaustive
enumeration, finite differences), never copied from the implementation.
"""

import itertools
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from srtext import (
    ModelConfig,
    TrainOptions,
    bicubic_upscale,
    build_model,
    count_params,
    ctc_loss,
    encode_text,
    fit,
    generate_dataset,
    greedy_ctc_decode,
    iteration_stage_parameter_count,
    make_batch,
    mean_psnr,
    model_from_checkpoint,
    psnr,
    rec_loss,
    sr_loss,
    ssim,
    total_loss,
)

torch.set_num_threads(1)


def _ok(n: int, msg: str) -> None:
    print(f"[criterion {n}] PASS — {msg}")


# ---------------------------------------------------------------------------
# 1. trace census


def test_criterion_1_trace_census():
    t0 = time.monotonic()
    for n_iter in (1, 2, 3):
        cfg = ModelConfig(iterations=n_iter)
        model = build_model(cfg, seed=0)
        model.eval()
        with torch.no_grad():
            trace = model(torch.rand(1, 3, cfg.height, cfg.width))
        assert len(trace.sr_images) == n_iter + 1
        for img in trace.sr_images:
            assert img.shape == (1, 3, 32, 128)
            assert img.min().item() >= 0.0 and img.max().item() <= 1.0
        dists = list(trace.p_list) + list(trace.p_hat_list)
        assert len(dists) == 2 * n_iter + 1
        for p in dists:
            assert p.shape == (1, 32, 37)
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    _ok(1, f"L+1 SR images at 3x32x128 and 2L+1 distributions at 32x37 "
           f"for L in {{1,2,3}} ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 2. cross-modal routing


def test_criterion_2_routing_isolation():
    cfg = ModelConfig(iterations=3)
    model = build_model(cfg, seed=1)
    model.eval()

    captured = []

    def grab(module, args):
        captured.append(tuple(a.detach().clone() for a in args))

    hooks = [s.register_forward_pre_hook(grab) for s in model.guidance_stages]
    with torch.no_grad():
        model(torch.rand(2, 3, cfg.height, cfg.width))
    for h in hooks:
        h.remove()
    assert len(captured) == cfg.iterations

    with torch.no_grad():
        for i, (stage, (h_pixel, h_token)) in enumerate(
            zip(model.guidance_stages, captured)
        ):
            ref = stage(h_pixel, h_token)
            no_pixel = stage(torch.zeros_like(h_pixel), h_token)
            assert torch.equal(no_pixel.semantic_clue, ref.semantic_clue), i
            assert torch.equal(no_pixel.p, ref.p), i
            no_token = stage(h_pixel, torch.zeros_like(h_token))
            assert torch.equal(no_token.pixel_clue, ref.pixel_clue), i
            assert torch.equal(no_token.sr_image, ref.sr_image), i
            assert torch.equal(no_token.p_hat, ref.p_hat), i
    _ok(2, "semantic clue ignores the pixel feature and pixel clue ignores "
           "the token feature, bit-exactly, at all 3 iterations")


# ---------------------------------------------------------------------------
# 3. CTC against exhaustive enumeration


def _enumerate_ctc_nll(logits: torch.Tensor, label: tuple[int, ...]) -> float:
    """-log P(label) by brute force over every alignment path."""
    log_probs = torch.log_softmax(logits.double(), dim=1).numpy()
    t, k = log_probs.shape
    total = -np.inf
    for path in itertools.product(range(k), repeat=t):
        collapsed = tuple(v for v, _ in itertools.groupby(path) if v != 0)
        if collapsed != label:
            continue
        score = sum(log_probs[i, c] for i, c in enumerate(path))
        total = np.logaddexp(total, score)
    return -total


def _min_frames(label: tuple[int, ...]) -> int:
    return len(label) + sum(a == b for a, b in zip(label, label[1:]))


def test_criterion_3_ctc_oracle():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 200:
        t = int(rng.integers(1, 7))
        label = tuple(int(v) for v in rng.integers(1, 3, size=rng.integers(1, 4)))
        if _min_frames(label) > t:
            continue
        logits = torch.from_numpy(rng.normal(0.0, 2.0, size=(t, 3)))
        got = float(ctc_loss(logits, label))
        want = _enumerate_ctc_nll(logits, label)
        assert got == pytest.approx(want, rel=1e-5), (label, t)
        checked += 1

    cfg = ModelConfig()
    for _ in range(1000):
        ids = rng.integers(0, cfg.num_classes, size=cfg.num_tokens)
        scores = np.zeros((cfg.num_tokens, cfg.num_classes))
        scores[np.arange(cfg.num_tokens), ids] = 4.0
        want_text = "".join(
            cfg.charset[v - 1]
            for v, _ in itertools.groupby(ids)
            if v != cfg.blank_index
        )
        assert greedy_ctc_decode(scores, cfg) == want_text
    _ok(3, "CTC matches path enumeration on 200 instances (rel 1e-5) and "
           "greedy decode matches the collapse oracle on 1000 sequences")


# ---------------------------------------------------------------------------
# 4. loss arithmetic


def _fake_trace(n_iter: int, sr_shape=(1, 3, 6, 6), m=4, k=4, seed=0, double=False):
    g = torch.Generator().manual_seed(seed)
    dtype = torch.float64 if double else torch.float32
    mk = lambda *shape: torch.rand(*shape, generator=g, dtype=dtype)
    return SimpleNamespace(
        sr_images=[mk(*sr_shape) for _ in range(n_iter + 1)],
        p_list=[mk(1, m, k) for _ in range(n_iter + 1)],
        p_hat_list=[mk(1, m, k) for _ in range(n_iter)],
    )


def test_criterion_4_loss_arithmetic(monkeypatch):
    import srtext.losses as losses_mod

    monkeypatch.setattr(
        losses_mod, "gradient_profile_loss", lambda sr, hr: torch.tensor(1.0)
    )
    monkeypatch.setattr(
        losses_mod,
        "ctc_loss_batch",
        lambda logits, targets, blank=0: torch.ones(logits.shape[0]),
    )
    trace = _fake_trace(2)
    hr = torch.rand(1, 3, 6, 6)
    labels = [(1, 2)]
    assert float(sr_loss(trace, hr)[0]) == 14.0
    assert float(rec_loss(trace, labels)[0]) == 20.0
    monkeypatch.undo()

    # finite differences on the real losses, tiny shapes, float64
    trace = _fake_trace(1, double=True)
    for tensor in [*trace.sr_images, *trace.p_list, *trace.p_hat_list]:
        tensor.requires_grad_(True)
    hr = torch.rand(1, 3, 6, 6, generator=torch.Generator().manual_seed(9),
                    dtype=torch.float64)
    labels = [(1, 2)]

    def value() -> float:
        return float(total_loss(trace, hr, labels).total.detach())

    report = total_loss(trace, hr, labels)
    tensors = [*trace.sr_images, *trace.p_list, *trace.p_hat_list]
    grads = torch.autograd.grad(report.total, tensors)
    rng = np.random.default_rng(3)
    eps = 1e-5
    for tensor, grad in zip(tensors, grads):
        flat = tensor.detach().view(-1)
        for idx in rng.choice(flat.numel(), size=3, replace=False):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + eps
            up = value()
            with torch.no_grad():
                flat[idx] = orig - eps
            down = value()
            with torch.no_grad():
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = float(grad.view(-1)[idx])
            assert an == pytest.approx(fd, rel=1e-2, abs=1e-8)
    _ok(4, "stubbed weights give sr=14 / rec=20 exactly; total_loss gradients "
           "match central differences (rel 1e-2)")


# ---------------------------------------------------------------------------
# 5. metric oracles


def _psnr_direct(a: np.ndarray, b: np.ndarray) -> float:
    return -10.0 * math.log10(float(np.mean((a - b) ** 2)))


def _ssim_direct(x: np.ndarray, y: np.ndarray) -> float:
    size, sigma = 11, 1.5
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(g, g)
    window /= window.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for c in range(x.shape[0]):
        for i in range(x.shape[1] - size + 1):
            for j in range(x.shape[2] - size + 1):
                px = x[c, i : i + size, j : j + size]
                py = y[c, i : i + size, j : j + size]
                mx, my = (window * px).sum(), (window * py).sum()
                vx = (window * px * px).sum() - mx * mx
                vy = (window * py * py).sum() - my * my
                cov = (window * px * py).sum() - mx * my
                vals.append(
                    ((2 * mx * my + c1) * (2 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
    return float(np.mean(vals))


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a = rng.random((3, 12, 13))
        b = rng.random((3, 12, 13))
        assert psnr(a, b) == pytest.approx(_psnr_direct(a, b), abs=1e-6)
        assert ssim(a, b) == pytest.approx(_ssim_direct(a, b), abs=1e-4)
    a = rng.random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    base = rng.random((3, 16, 16)) * 0.5
    assert psnr(base, base + 0.5) == pytest.approx(6.0206, abs=1e-3)
    _ok(5, "PSNR within 1e-6 dB and SSIM within 1e-4 of direct formulas on "
           "50 pairs; ssim(a,a)=1; 0.5 offset gives 6.0206 dB")


# ---------------------------------------------------------------------------
# 6. gradient liveness


def test_criterion_6_gradient_liveness():
    cfg = ModelConfig()
    model = build_model(cfg, seed=0)
    model.train()
    g = torch.Generator().manual_seed(123)
    x = torch.rand(2, 3, cfg.height, cfg.width, generator=g)
    hr = torch.rand(2, 3, 2 * cfg.height, 2 * cfg.width, generator=g)
    labels = [encode_text("abc", cfg), encode_text("xy9", cfg)]
    total_loss(model(x), hr, labels).total.backward()

    dead = [
        name
        for name, p in model.named_parameters()
        if p.grad is None or not bool(p.grad.abs().sum() > 0)
    ]
    n_total = sum(1 for _ in model.named_parameters())
    live = n_total - len(dead)
    # Every tensor is expected to be live; anything below lists the culprits.
    assert not dead, f"dead parameter tensors: {dead}"
    assert live / n_total >= 0.99
    _ok(6, f"{live}/{n_total} parameter tensors receive nonzero gradient "
           f"from one backward pass at the default config")


# ---------------------------------------------------------------------------
# 7. overfit run (tiny config, 8 pairs)


def test_criterion_7_overfit_run():
    t0 = time.monotonic()
    cfg = ModelConfig(
        hidden_channels=32, token_dim=64, encoder_depth=1, iterations=2
    )
    pairs = generate_dataset(8, 0, cfg)
    opts = TrainOptions(steps=2000, batch_size=8, lr=3e-3, seed=0)
    ckpt = fit(pairs, cfg, opts)
    model = model_from_checkpoint(ckpt)

    lr_b, hr_b, _ = make_batch(pairs, cfg)
    with torch.no_grad():
        trace = model(lr_b)
    texts = [p.label.text for p in pairs]
    final = [greedy_ctc_decode(trace.p_list[-1][i], cfg) for i in range(8)]
    first = [greedy_ctc_decode(trace.p_list[0][i], cfg) for i in range(8)]
    acc_final = sum(p == t for p, t in zip(final, texts)) / 8
    acc_first = sum(p == t for p, t in zip(first, texts)) / 8

    sr = trace.sr_images[-1]
    bic = bicubic_upscale(lr_b)
    psnr_sr = mean_psnr([psnr(sr[i], hr_b[i]) for i in range(8)])
    psnr_bic = mean_psnr([psnr(bic[i], hr_b[i]) for i in range(8)])
    elapsed = time.monotonic() - t0

    assert acc_final >= 7 / 8, f"word accuracy {acc_final} after overfit"
    assert psnr_sr >= psnr_bic + 0.5, (
        f"SR {psnr_sr:.2f} dB vs bicubic {psnr_bic:.2f} dB"
    )
    assert acc_final >= acc_first, (acc_first, acc_final)
    assert elapsed <= 600.0, f"took {elapsed:.0f}s"
    _ok(7, f"acc {acc_final*8:.0f}/8 (first iter {acc_first*8:.0f}/8), "
           f"SR {psnr_sr:.2f} dB vs bicubic {psnr_bic:.2f} dB, "
           f"{elapsed:.0f}s for 2000 steps")


# ---------------------------------------------------------------------------
# 8. parameter growth


def test_criterion_8_parameter_growth():
    cfg = ModelConfig()
    p1 = count_params(build_model(ModelConfig(iterations=1), seed=0))
    p2 = count_params(build_model(ModelConfig(iterations=2), seed=0))
    stage = iteration_stage_parameter_count(cfg)
    assert p2 - p1 == stage
    _ok(8, f"params(L=2) - params(L=1) = {p2 - p1:,} = one iteration stage")


# ---------------------------------------------------------------------------
# 9. determinism and resume


def _states_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    return all(torch.equal(a[k], b[k]) for k in a)


def test_criterion_9_determinism_and_resume(tmp_path, tiny_cfg, tiny_dataset):
    logs = []
    states = []
    for run in range(2):
        log = tmp_path / f"run{run}.jsonl"
        opts = TrainOptions(steps=4, batch_size=2, lr=1e-3, seed=5,
                            log_path=str(log))
        ckpt = fit(tiny_dataset, tiny_cfg, opts)
        logs.append(log.read_text())
        states.append(ckpt.model_state)
    assert logs[0] == logs[1]
    assert _states_equal(states[0], states[1])

    log_full = tmp_path / "full.jsonl"
    full = fit(
        tiny_dataset, tiny_cfg,
        TrainOptions(steps=4, batch_size=2, lr=1e-3, seed=5,
                     log_path=str(log_full)),
    )
    log_split = tmp_path / "split.jsonl"
    half = fit(
        tiny_dataset, tiny_cfg,
        TrainOptions(steps=2, batch_size=2, lr=1e-3, seed=5,
                     log_path=str(log_split)),
    )
    resumed = fit(
        tiny_dataset, tiny_cfg,
        TrainOptions(steps=4, batch_size=2, lr=1e-3, seed=5,
                     log_path=str(log_split)),
        resume=half,
    )
    assert _states_equal(full.model_state, resumed.model_state)
    assert _states_equal(
        {f"{i}.{k}": v
         for i, s in enumerate(full.optimizer_state["state"].values())
         for k, v in s.items() if torch.is_tensor(v)},
        {f"{i}.{k}": v
         for i, s in enumerate(resumed.optimizer_state["state"].values())
         for k, v in s.items() if torch.is_tensor(v)},
    )
    assert log_full.read_text() == log_split.read_text()
    _ok(9, "fixed-seed loss curves are bit-identical and save->resume "
           "matches the uninterrupted run exactly")
