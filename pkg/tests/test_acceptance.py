"""End-to-end acceptance criteria, each checked at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line; the lines are repeated in the
pytest terminal summary. Run alone with::

    pytest tests/test_acceptance.py -v
"""

import math
import time

import numpy as np
import pytest
import torch

from attrcl.attention import HeadConfig, head_param_count, spatial_attention
from attrcl.cli import main as cli_main
from attrcl.datamodel import (AttributeSpec, Dataset, Item, SynthConfig, build_task_sequence,
                              generate_synthetic)
from attrcl.encoder import Encoder, ema_update, init_teacher
from attrcl.evaluation import average_precision, forgetting_report, map_for_attribute
from attrcl.losses import Hyperparams, distill_mse, info_nce, triplet_loss
from attrcl.model import load_checkpoint
from attrcl.trainer import (MethodConfig, count_images_per_step, init_state, train_sequence,
                            train_task)
from attrcl.verify import (brute_force_map, closed_form_ema, naive_info_nce, random_ranking_map)

from gradtools import check_grad

RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str = "", seconds: float | None = None):
    timing = f" [{seconds:.1f}s]" if seconds is not None else ""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}{timing}"
    if detail:
        line += f" -- {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def test_01_parameter_budget():
    count = head_param_count(HeadConfig.reference())
    # published as "0.246M": three decimals of millions, truncated
    shown = math.floor(count / 1e3) / 1e3
    report(1, "per-head parameter budget", count == 246_528 and shown == 0.246,
           f"count={count:,} ({shown}M)")


def test_02_attention_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):  # 10 x 1000 = 10^4 inputs
        n = 1000
        h, w = rng.integers(1, 9, size=2)
        reduced = torch.from_numpy(np.tanh(rng.normal(0, 2, (n, 16, h, w))))
        attr = torch.from_numpy(rng.normal(0, rng.uniform(0.1, 20), (n, 16)))
        amap, _ = spatial_attention(reduced, attr)
        worst = max(worst, float((amap.sum(dim=(1, 2)) - 1).abs().max()))
    dt = time.perf_counter() - t0
    report(2, "attention weights sum to 1", worst <= 1e-6 and dt < 10,
           f"max |sum-1| = {worst:.2e} over 10^4 inputs", dt)


def _grad_cases():
    from attrcl.attention import AttentionHead, channel_attention, reduce_features
    rng = np.random.default_rng(3)
    cfg = HeadConfig(c_img=3, dim=4, text_dim=5, hidden=6)
    for k in range(20):
        head = AttentionHead(cfg, seed=k).double().train()
        proj = torch.from_numpy(rng.normal(size=(2, 4, 2, 2)))
        yield "reduce_features", (lambda f, head=head, proj=proj:
                                  (reduce_features(head, f) * proj).sum()), rng.normal(size=(2, 3, 2, 2))
        attr = torch.from_numpy(rng.normal(size=(2, 4)))
        pw = torch.from_numpy(rng.normal(size=(2, 4)))
        yield "spatial_attention", (lambda r, attr=attr, pw=pw:
                                    (spatial_attention(r, attr)[1] * pw).sum()), \
            rng.uniform(-1, 1, size=(2, 4, 2, 2))
        yield "channel_attention", (lambda p, head=head, attr=attr, pw=pw:
                                    (channel_attention(head, p, attr) * pw).sum()), rng.normal(size=(2, 4))
        pos = torch.from_numpy(rng.normal(size=(4, 6)))
        yield "info_nce", (lambda a, pos=pos: info_nce(a, pos, 0.3)), rng.normal(size=(4, 6))
        p, n = torch.from_numpy(rng.normal(size=(3, 5))), torch.from_numpy(rng.normal(size=(3, 5)))
        yield "triplet_loss", (lambda a, p=p, n=n: triplet_loss(a, p, n, 2.5)), rng.normal(size=(3, 5))
        t1, t2 = (torch.from_numpy(rng.normal(size=(2, 3, 2, 2))) for _ in range(2))
        yield "distill_mse", (lambda s, t1=t1, t2=t2: distill_mse([s, s * s], [t1, t2])), \
            rng.normal(size=(2, 3, 2, 2))


def test_03_gradient_suite():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, fn, point in _grad_cases():
        rep = check_grad(name, fn, point, step=1e-5)
        worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
        counts[name] = counts.get(name, 0) + 1
    dt = time.perf_counter() - t0
    ok = all(v < 1e-3 for v in worst.values()) and min(counts.values()) >= 20 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, "analytic vs finite-difference gradients", ok,
           f"max rel. err ({min(counts.values())} cases each): {detail}", dt)


def test_04_info_nce_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for k in range(100):
        b = [1, 2, 4, 8][k % 4]
        a, p = rng.normal(size=(b, 16)), rng.normal(size=(b, 16))
        fast = info_nce(torch.from_numpy(a), torch.from_numpy(p), 0.3).item()
        worst = max(worst, abs(fast - naive_info_nce(a, p, 0.3)))
    b1 = info_nce(torch.from_numpy(rng.normal(size=(1, 16))),
                  torch.from_numpy(rng.normal(size=(1, 16))), 0.3).item()
    dt = time.perf_counter() - t0
    report(4, "InfoNCE equals the loop oracle", worst <= 1e-6 and b1 == 0.0 and dt < 10,
           f"max diff {worst:.1e} over 100 batches, B=1 loss {b1!r}", dt)


def test_05_ema_closed_form():
    t0 = time.perf_counter()
    torch.manual_seed(5)
    student = Encoder().double()
    teacher = init_teacher(student, 0.999)
    fixed = {k: v.clone() for k, v in teacher.state_dict().items()}
    ema_update(teacher, student)
    fixed_ok = all(torch.equal(v, fixed[k]) for k, v in teacher.state_dict().items())
    with torch.no_grad():
        for p in teacher.model.parameters():
            p.normal_()
    theta0 = {k: v.clone() for k, v in teacher.model.named_parameters()}
    s_params = dict(student.named_parameters())
    for _ in range(1000):
        ema_update(teacher, student)
    worst = max(float(np.abs(p.numpy() - closed_form_ema(theta0[k].numpy(),
                                                          s_params[k].detach().numpy(),
                                                          0.999, 1000)).max())
                for k, p in teacher.model.named_parameters())
    dt = time.perf_counter() - t0
    report(5, "EMA matches the closed form", fixed_ok and worst <= 1e-10 and dt < 5,
           f"max |diff| {worst:.1e} after T=1000; fixed point {'held' if fixed_ok else 'broken'}",
           dt)


def test_06_head_isolation(tmp_path):
    t0 = time.perf_counter()
    data = generate_synthetic(SynthConfig.desk(), seed=0)
    tasks = build_task_sequence([data], data.attribute_names[:2], 500, seed=0)
    cfg = MethodConfig(hyper=Hyperparams(batch=16))
    state = init_state(cfg, 0)
    train_task(state, tasks[0], cfg, data)
    from attrcl.model import save_checkpoint
    save_checkpoint(tmp_path / "task_000.npz", state.model, state.task_cursor)
    train_task(state, tasks[1], cfg, data)
    saved, _ = load_checkpoint(tmp_path / "task_000.npz")
    attr = tasks[0].attribute
    after = state.model.registry[attr].state_dict()
    same = all(v.numpy().tobytes() == after[k].numpy().tobytes()
               for k, v in saved.registry[attr].state_dict().items())
    dt = time.perf_counter() - t0
    report(6, "head 0 unchanged by task 1", same and dt < 120,
           f"{len(after)} tensors compared byte-for-byte", dt)


@pytest.mark.slow
def test_07_forgetting_pattern():
    t0 = time.perf_counter()
    forget_wins, margin_wins, lines = 0, 0, []
    for seed in (0, 1, 2):
        train = generate_synthetic(SynthConfig.desk(), seed)
        held_out = generate_synthetic(SynthConfig.desk(items_per_subclass=25), seed + 1000)
        tasks = build_task_sequence([train], train.attribute_names, 500, seed)
        reports = {}
        for method in ("mclfir", "multihead_triplet"):
            cfg = MethodConfig(method=method, hyper=Hyperparams(batch=16), epochs=3)
            reports[method] = forgetting_report(train_sequence(tasks, cfg, seed, train), held_out)
        first = tasks[0].attribute
        labels = [it.labels[first] for it in held_out.carriers(first)]
        chance = 100.0 * random_ranking_map(labels, n_perm=20_000, seed=seed)
        a0 = reports["mclfir"].rows[0].a
        f_ours = reports["mclfir"].mean_forgetting
        f_base = reports["multihead_triplet"].mean_forgetting
        forget_wins += f_ours <= f_base
        margin_wins += a0 - chance >= 10.0
        lines.append(f"seed {seed}: forgetting {f_ours:.2f} vs {f_base:.2f}, "
                     f"task-0 A {a0:.2f} vs chance {chance:.2f}")
        print("  " + lines[-1], flush=True)
    dt = time.perf_counter() - t0
    ok = forget_wins >= 2 and margin_wins >= 2 and dt < 15 * 60
    report(7, "forgetting pattern on the synthetic sequence", ok,
           f"forgetting <= baseline in {forget_wins}/3 seeds, task-0 margin >= 10 in "
           f"{margin_wins}/3 seeds; " + "; ".join(lines), dt)


def test_08_images_per_step():
    data = generate_synthetic(SynthConfig.desk(1, 4, 10), seed=0)
    b = 16
    seen = {}
    for method in ("mclfir", "multihead_triplet"):
        cfg = MethodConfig(method=method, hyper=Hyperparams(batch=b))
        tasks = build_task_sequence([data], data.attribute_names, b, seed=0)
        state = init_state(cfg, 0)
        steps0 = state.step
        train_task(state, tasks[0], MethodConfig(method=method, hyper=Hyperparams(batch=b),
                                                 epochs=1), data)
        seen[method] = state.model.encoder.images_seen / (state.step - steps0)
        assert seen[method] == count_images_per_step(cfg)
    ratio = seen["mclfir"] / seen["multihead_triplet"]
    report(8, "doublet vs triplet encoder cost",
           seen["mclfir"] == 2 * b and seen["multihead_triplet"] == 3 * b and ratio == 2 / 3,
           f"{seen['mclfir']:.0f} vs {seen['multihead_triplet']:.0f} images/step, ratio {ratio}")


class _Fixed:
    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)

    def embed(self, images, attribute, use_teacher=False):
        return self.table[np.rint(images[:, 0, 0, 0]).astype(int)]


def test_09_map_oracle():
    ap = average_precision([1, 0, 1])
    labels = ["long", "short", "long", "short", "long"]
    table = [[0.9, 0.1, 0.3], [0.2, 0.8, -0.1], [0.5, 0.5, 0.5], [0.9, 0.1, 0.3], [-0.4, 0.3, 0.9]]
    items = [Item(f"q{k}", np.full((2, 2, 3), float(k), np.float32), {"length": lab})
             for k, lab in enumerate(labels)]
    ds = Dataset([AttributeSpec("length", ("long", "short"))], items)
    got = map_for_attribute(_Fixed(table), ds, "length")
    ref = brute_force_map(table, [it.id for it in items], labels)
    report(9, "AP and mAP against hand and brute-force oracles",
           ap == 5 / 6 and abs(got - ref) <= 1e-12,
           f"AP([1,0,1]) = {ap!r}; mAP {got:.12f} vs oracle {ref:.12f}")


def test_10_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(data)]) == 0
    flags = ["train", "--data", str(data), "--epochs", "1", "--doublets", "64", "--seed", "7"]
    assert cli_main(flags + ["--out", str(tmp_path / "a")]) == 0
    assert cli_main(flags + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "loss_trace.csv").read_bytes()
    b = (tmp_path / "b" / "loss_trace.csv").read_bytes()
    dt = time.perf_counter() - t0
    report(10, "identical runs give identical loss CSVs", a == b and dt < 300,
           f"{len(a.splitlines()) - 1} steps, {len(a)} bytes", dt)
