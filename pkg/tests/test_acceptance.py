"""Acceptance suite: one test class per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion. The two end-to-end learning runs take several
minutes each on one CPU core.
"""

import itertools
import json
import time

import numpy as np
import pytest

from suture_ease import autodiff as ad
from suture_ease.autodiff import Tape, Tensor
from suture_ease.cli import main
from suture_ease.data import (
    AugmentPolicy,
    ClipRecord,
    decode_clip,
    encode_clip,
    filter_domain,
    normalize,
    prepare_clip,
    read_clip,
    read_manifest,
    split_videos,
    write_clip,
)
from suture_ease.domains import ALL_DOMAINS, DomainKey, Phase, Skill, is_valid
from suture_ease.errors import FormatError, RoutingError
from suture_ease.evaluation import bootstrap_ci, evaluate, roc_auc
from suture_ease.models import (
    CNN3D,
    MVIT,
    build_model,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    pooled_attention,
    save_checkpoint,
)
from suture_ease.router import default_routes, resolve
from suture_ease.synth import TASK_DOMAINS, SynthSpec, gen_clip, gen_dataset, record_seed
from suture_ease.training import AdamHyper, AdamState, TrainConfig, bce_with_logits, read_history, train, train_step

from nano import NANO_MVIT, SMALL_CNN
from oracles import (
    attention_naive,
    auc_bruteforce,
    central_difference,
    conv3d_naive,
    layernorm_naive,
    matmul_naive,
    maxpool3d_naive,
    rel_err,
    softmax_naive,
)

N_INSTANCES = 100


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# ------------------------------------------------------------------ 1


@criterion(1, "numeric kernels match loop oracles on >= 100 f64 instances each (< 60 s)")
class TestKernelOracles:
    def test_all_kernels(self):
        rng = np.random.default_rng(101)
        start = time.perf_counter()
        worst = {"conv3d": 0.0, "maxpool3d": 0.0, "matmul": 0.0, "layernorm": 0.0, "softmax": 0.0}
        for _ in range(N_INSTANCES):
            c, o = rng.integers(1, 3, 2)
            dims = rng.integers(3, 6, 3)
            k = rng.integers(1, 4, 3)
            stride = tuple(int(s) for s in rng.integers(1, 3, 3))
            pad = tuple(int(p) for p in rng.integers(0, 2, 3))
            x = rng.standard_normal((1, c, *dims))
            w = rng.standard_normal((o, c, *k))
            b = rng.standard_normal(o)
            got = ad.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
            worst["conv3d"] = max(worst["conv3d"], rel_err(got, conv3d_naive(x, w, b, stride, pad)))

            win = tuple(int(v) for v in rng.integers(1, 3, 3))
            got = ad.maxpool3d(Tensor(x), window=win, stride=stride).data
            worst["maxpool3d"] = max(worst["maxpool3d"], rel_err(got, maxpool3d_naive(x, win, stride)))

            m, kk, n = rng.integers(1, 9, 3)
            a2, b2 = rng.standard_normal((m, kk)), rng.standard_normal((kk, n))
            worst["matmul"] = max(worst["matmul"], rel_err(ad.matmul(Tensor(a2), Tensor(b2)).data,
                                                           matmul_naive(a2, b2)))

            d = int(rng.integers(2, 33))
            row, g, bb = rng.standard_normal(d) * 3, rng.standard_normal(d), rng.standard_normal(d)
            got = ad.layernorm(Tensor(row[None]), Tensor(g), Tensor(bb), eps=1e-6).data[0]
            worst["layernorm"] = max(worst["layernorm"], rel_err(got, layernorm_naive(list(row), g, bb, 1e-6)))

            logits = rng.standard_normal(d) * 5
            worst["softmax"] = max(worst["softmax"], rel_err(ad.softmax(Tensor(logits)).data,
                                                             softmax_naive(list(logits))))
        elapsed = time.perf_counter() - start
        print(f"\nworst relative errors {worst}, {elapsed:.1f}s")
        assert all(worst[k] < 1e-12 for k in ("conv3d", "maxpool3d", "matmul", "layernorm"))
        assert worst["softmax"] < 1e-10
        assert elapsed < 60


# ------------------------------------------------------------------ 2


GRAD_FLOOR = 1e-6


def _randomise(model, rng):
    """Move off the init point: fan-in scaled weights and O(1) rel-pos tables.

    At init the attention is almost uniform and some gradients sit near 1e-8,
    below what h = 1e-5 differences can resolve in f64.
    """
    for name, p in model.params.items():
        shape = p.shape
        if "rel_pos" in name:
            p.data[...] = 0.5 * rng.standard_normal(shape)
        elif p.ndim == 1 and "norm" in name and name.endswith("weight"):
            p.data[...] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif p.ndim == 1:
            p.data[...] = 0.1 * rng.standard_normal(shape)
        elif p.ndim == 2:
            p.data[...] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            p.data[...] = rng.standard_normal(shape) / np.sqrt(np.prod(shape[1:]))


def _fd_check(arch, cfg, seed):
    model = build_model(arch, cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    _randomise(model, rng)
    x = rng.standard_normal((1, cfg.in_channels, cfg.frames, cfg.height, cfg.width))
    y = np.array([[1.0]])
    model.zero_grad()
    with Tape() as tape:
        loss = bce_with_logits(model(x), y)
    tape.backward(loss)

    def f():
        return float(bce_with_logits(model(x).data, y).data)

    errors, grads = {}, {}
    for name, p in model.params.items():
        numeric = central_difference(f, p.data, h=1e-5)
        # norm-wise, with the denominator floored so exactly-zero gradients compare absolutely
        denom = max(np.linalg.norm(p.grad), np.linalg.norm(numeric), GRAD_FLOOR)
        errors[name] = float(np.linalg.norm(p.grad - numeric) / denom)
        grads[name] = p.grad
    return errors, grads


@criterion(2, "every parameter gradient of BCE matches central differences, rel err < 1e-4 (< 10 min)")
class TestGradientSuite:
    @pytest.mark.parametrize("arch, cfg", [(CNN3D, SMALL_CNN), (MVIT, NANO_MVIT)], ids=["cnn3d", "mvit"])
    def test_full_architecture(self, arch, cfg):
        start = time.perf_counter()
        errors, grads = _fd_check(arch, cfg, seed=7)
        elapsed = time.perf_counter() - start
        worst = max(errors, key=errors.get)
        print(f"\n{arch}: {len(errors)} tensors, worst {worst} = {errors[worst]:.2e}, {elapsed:.1f}s")
        assert (cfg.frames, cfg.height, cfg.width) == ((16, 16, 16) if arch == CNN3D else (16, 32, 32))
        assert all(e < 1e-4 for e in errors.values()), {k: v for k, v in errors.items() if v >= 1e-4}
        if arch == MVIT:
            # a key bias shifts each query row of logits uniformly; softmax cancels it
            assert all(np.abs(g).max() < 1e-12 for k, g in grads.items() if k.endswith("attn.k.bias"))
        assert elapsed < 600


# ------------------------------------------------------------------ 3


@criterion(3, "pooled attention with unit strides equals naive multi-head attention, rel err < 1e-10")
class TestAttentionReduction:
    def test_reduction(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(20):
            heads = int(rng.integers(1, 4))
            d_in, d_out = int(rng.integers(2, 9)), heads * int(rng.integers(1, 5))
            grid = tuple(int(v) for v in rng.integers(1, 4, 3))
            x = rng.standard_normal((2, int(np.prod(grid)), d_in))
            p = {}
            for n in "qkv":
                p[f"{n}.weight"] = Tensor(rng.standard_normal((d_in, d_out)) * 0.7)
                p[f"{n}.bias"] = Tensor(np.zeros(d_out))
            out, q_grid = pooled_attention(Tensor(x), grid, p, (1, 1, 1), (1, 1, 1), heads=heads,
                                           use_rel_pos=False, use_residual_pool=False)
            assert q_grid == grid
            expected = attention_naive(x, p["q.weight"].data, p["k.weight"].data, p["v.weight"].data, heads)
            worst = max(worst, rel_err(out.data, expected))
        assert worst < 1e-10


# ------------------------------------------------------------------ 4


@criterion(4, "rank AUC equals pairwise brute force on 1000 tied instances; 0.75 example; rank invariance")
class TestAucCorrectness:
    def test_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n = int(rng.integers(2, 51))
            y = rng.integers(0, 2, n)
            y[rng.choice(n, 2, replace=False)] = [0, 1]
            s = rng.integers(0, int(rng.integers(2, 10)), n) / 7.0
            assert roc_auc(s, y) == auc_bruteforce(s, y)

    def test_four_scores(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_monotone_invariance(self):
        rng = np.random.default_rng(44)
        for _ in range(200):
            y = np.r_[0, 1, rng.integers(0, 2, 30)]
            s = rng.integers(0, 8, 32) / 8.0
            for transform in (lambda v: 3 * v + 1, np.exp, lambda v: v ** 3, np.arctan):
                assert roc_auc(transform(s), y) == roc_auc(s, y)


# ------------------------------------------------------------------ 5


@criterion(5, "bootstrap interval bitwise reproducible; separated 200/200 gives [1.0, 1.0]")
class TestBootstrapDeterminism:
    def test_repeatable(self):
        rng = np.random.default_rng(5)
        y = np.r_[np.zeros(60), np.ones(40)]
        s = rng.random(100) + 0.3 * y
        a = bootstrap_ci(s, y, n_bootstrap=2000, seed=11)
        b = bootstrap_ci(s.copy(), y.copy(), n_bootstrap=2000, seed=11)
        assert np.float64(a[0]).tobytes() == np.float64(b[0]).tobytes()
        assert np.float64(a[1]).tobytes() == np.float64(b[1]).tobytes()

    def test_separated(self):
        rng = np.random.default_rng(55)
        s = np.r_[rng.uniform(0, 0.5, 200), rng.uniform(0.5001, 1, 200)]
        y = np.r_[np.zeros(200), np.ones(200)]
        assert bootstrap_ci(s, y, n_bootstrap=2000, seed=0) == (1.0, 1.0)


# ------------------------------------------------------------------ 6


@criterion(6, "default routes: 4 domains MViTv2 @16x224x224, 3 CNN3D @16x384x384; 11 invalid pairs rejected")
class TestRoutingFidelity:
    def test_routes(self):
        routes = default_routes()
        expected_mvit = {
            (Phase.NeedleHandling, Skill.NumberOfRepositions),
            (Phase.NeedleDriving, Skill.DrivingSmoothness),
            (Phase.NeedleDriving, Skill.WristRotation),
            (Phase.NeedleWithdrawal, Skill.WristRotation),
        }
        expected_cnn = {
            (Phase.NeedleHandling, Skill.NeedleHoldDepth),
            (Phase.NeedleHandling, Skill.NeedleHoldRatio),
            (Phase.NeedleHandling, Skill.NeedleHoldAngle),
        }
        got = {(r.domain.phase, r.domain.skill): (r.family, r.frames, r.resolution) for r in routes}
        assert len(routes) == 7 == len(got)
        assert {k for k, v in got.items() if v == (MVIT, 16, (224, 224))} == expected_mvit
        assert {k for k, v in got.items() if v == (CNN3D, 16, (384, 384))} == expected_cnn
        assert [r.domain for r in routes] == list(ALL_DOMAINS)

    def test_invalid_pairs(self):
        rejected = 0
        for phase, skill in itertools.product(Phase, Skill):
            if is_valid(phase, skill):
                continue
            with pytest.raises(RoutingError):
                resolve(default_routes(), DomainKey(phase, skill))
            rejected += 1
        assert rejected == 11


# ------------------------------------------------------------------ 7, 8


def _learning_run(tmp_path, task, family, epochs, lr):
    manifest = gen_dataset(SynthSpec(task, n_videos=100, stitches_per_video=5, resolution=(32, 32),
                                     noise_std=0.05, seed=0), tmp_path / "data")
    cfg = TrainConfig(TASK_DOMAINS[task], str(manifest), str(tmp_path / "run"), epochs=epochs, batch_size=8,
                      learning_rate=lr, family=family, resolution=(32, 32), seed=0,
                      augmentation=AugmentPolicy())
    records = split_videos(read_manifest(manifest), cfg.test_fraction, cfg.seed)
    n_train = len(filter_domain(records, cfg.domain, "train"))
    n_test = len(filter_domain(records, cfg.domain, "test"))
    start = time.perf_counter()
    result = train(cfg)
    elapsed = time.perf_counter() - start
    # re-score the saved checkpoint through the evaluation path
    split_manifest = tmp_path / "split.jsonl"
    from suture_ease.data import write_manifest
    write_manifest(records, split_manifest)
    report, _, _ = evaluate(result.checkpoint, split_manifest, cfg.domain, seed=0, n_bootstrap=2000)
    aucs = [h["test_auc"] for h in result.history]
    print(f"\n{family} on {task}: {n_train}/{n_test} clips, per-epoch test AUC {np.round(aucs, 3).tolist()}, "
          f"best {report.auc:.3f} [{report.ci_low:.3f}, {report.ci_high:.3f}] at epoch {result.best_epoch}, "
          f"{elapsed:.0f}s")
    return n_train, n_test, report, result, elapsed


@criterion(7, "3D-CNN learns hold_angle at 32x32 (400/100 clips, noise 0.05, <= 20 epochs): AUC >= 0.90 (< 15 min)")
class TestLearningCnn:
    def test_hold_angle(self, tmp_path):
        n_train, n_test, report, result, elapsed = _learning_run(tmp_path, "hold_angle", CNN3D, 10, 1e-3)
        assert (n_train, n_test) == (400, 100)
        assert len(result.history) <= 20
        assert report.auc == result.best_auc
        assert report.auc >= 0.90
        assert elapsed < 15 * 60


@criterion(8, "MViTv2 learns reposition_count at 32x32 (400/100 clips, <= 30 epochs): AUC >= 0.80 (< 30 min)")
class TestLearningMvit:
    def test_reposition_count(self, tmp_path):
        n_train, n_test, report, result, elapsed = _learning_run(tmp_path, "reposition_count", MVIT, 30, 1e-3)
        assert (n_train, n_test) == (400, 100)
        assert len(result.history) <= 30
        assert report.auc == result.best_auc
        assert report.auc >= 0.80
        assert elapsed < 30 * 60


# ------------------------------------------------------------------ 9


def _fixed_subset(task, n=32):
    clips, labels = [], []
    for i in range(n):
        clip, _ = gen_clip(task, i % 2, (32, 32), 0.05, record_seed(9, i))
        clips.append(normalize(prepare_clip(clip)))
        labels.append(i % 2)
    return np.stack(clips), np.array(labels, dtype=np.float32)


@criterion(9, "each architecture drives training BCE < 0.05 on a fixed 32-clip subset within 500 steps")
class TestMemorisation:
    # one subset shared by both architectures
    @pytest.mark.parametrize("arch", [CNN3D, MVIT], ids=["cnn3d", "mvit"])
    def test_memorise(self, arch):
        from suture_ease.models import config_from_dict

        x, y = _fixed_subset("hold_angle")
        model = build_model(arch, config_from_dict(arch, {"height": 32, "width": 32}), seed=0)
        state, hyper = AdamState(), AdamHyper(lr=1e-3)
        rng = np.random.default_rng(9)
        full_loss, steps = np.inf, 0
        while steps < 500:
            for idx in rng.permutation(32).reshape(4, 8):
                train_step(model, x[idx], y[idx], state, hyper)
                steps += 1
            if steps % 20 == 0:
                full_loss = float(bce_with_logits(model(x).data, y.reshape(-1, 1)).data)
                if full_loss < 0.05:
                    break
        print(f"\n{arch}: full-subset BCE {full_loss:.4f} after {steps} steps")
        assert steps <= 500
        assert full_loss < 0.05


# ------------------------------------------------------------------ 10


@pytest.fixture(scope="module")
def determinism_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("determinism")
    return gen_dataset(SynthSpec("smooth_vs_jerky", n_videos=20, stitches_per_video=2, resolution=(32, 32)),
                       root / "data")


@criterion(10, "identical config + seed give bitwise-identical loss history and checkpoint, also with --threads 2")
class TestDeterminism:
    @pytest.mark.parametrize("threads", [1, 2])
    @pytest.mark.parametrize("family, model", [(CNN3D, {"block_channels": [4, 6, 8]}),
                                               (MVIT, json.loads(json.dumps(NANO_MVIT.to_dict())))],
                             ids=["cnn3d", "mvit"])
    def test_repeat_runs(self, tmp_path, determinism_data, threads, family, model):
        domain = "Needle Driving: Driving Smoothness"
        config = {"domain": domain, "manifest": str(determinism_data), "epochs": 2, "batch_size": 8,
                  "learning_rate": 1e-3, "family": family, "resolution": [32, 32], "model": model,
                  "augmentation": "default", "seed": 5, "plot": False}
        (tmp_path / "cfg.json").write_text(json.dumps(config))
        runs = []
        for name in ("a", "b"):
            code = main(["train", "--config", str(tmp_path / "cfg.json"), "--threads", str(threads),
                         "--out", str(tmp_path / name)])
            assert code == 0
            hist = read_history(tmp_path / name / "history.jsonl")
            runs.append(([(h["train_loss"], h["test_auc"]) for h in hist],
                         (tmp_path / name / "model.ckpt").read_bytes()))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]


# ------------------------------------------------------------------ 11


@criterion(11, "clip and checkpoint files round-trip bitwise; bad magic and truncation raise format errors")
class TestFormatRoundTrips:
    def test_clip(self, tmp_path):
        rng = np.random.default_rng(11)
        for shape in ((3, 16, 12, 20), (1, 5, 7, 3)):
            clip = rng.standard_normal(shape).astype(np.float32)
            path = write_clip(tmp_path / "c.clip", clip)
            back = read_clip(path)
            assert back.dtype == np.float32 and back.shape == shape and back.tobytes() == clip.tobytes()
            assert encode_clip(back) == path.read_bytes()

    def test_checkpoint(self, tmp_path):
        for arch, cfg in ((CNN3D, SMALL_CNN), (MVIT, NANO_MVIT)):
            model = build_model(arch, cfg, seed=4)
            path = save_checkpoint(model, tmp_path / f"{arch}.ckpt", {"epoch": 3})
            back = load_checkpoint(path, expected_arch=arch, expected_config=cfg)
            assert back.config == cfg and back.metadata == {"epoch": 3}
            for name, p in model.params.items():
                assert back.params[name].data.tobytes() == p.data.tobytes()
            assert encode_checkpoint(back) == path.read_bytes()

    def test_corruption(self, tmp_path):
        clip_buf = encode_clip(np.zeros((3, 2, 4, 4), np.float32))
        with pytest.raises(FormatError) as info:
            decode_clip(b"XXXX" + clip_buf[4:])
        assert info.value.offset == 0 and info.value.code == "format" and info.value.exit_code == 3
        with pytest.raises(FormatError, match="truncated"):
            decode_clip(clip_buf[:-5])

        ckpt_buf = encode_checkpoint(build_model(CNN3D, SMALL_CNN))
        with pytest.raises(FormatError) as info:
            decode_checkpoint(b"NOPE" + ckpt_buf[4:])
        assert info.value.offset == 0
        with pytest.raises(FormatError, match="truncated"):
            decode_checkpoint(ckpt_buf[:-7])

    def test_cli_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + bytes(100))
        clip = write_clip(tmp_path / "c.clip", np.zeros((3, 16, 16, 16), np.float32))
        code = main(["predict", "--checkpoint", str(bad), "--domain", "Needle Handling: Needle Hold Angle",
                     "--clip", str(clip)])
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert code == 3 and err["code"] == "format"


# ------------------------------------------------------------------ 12


@criterion(12, "80-video manifest at 0.2 splits 64/16 videos with no overlap, stable under seed")
class TestSplitCorrectness:
    def _records(self):
        domain = ALL_DOMAINS[0]
        return [ClipRecord(f"vid{v:02d}", s, domain, (v + s) % 2, f"/clips/{v}_{s}.clip")
                for v in range(80) for s in range(int(1 + v % 4))]

    def test_split(self):
        records = self._records()
        out = split_videos(records, 0.2, seed=12)
        train_ids = {r.video_id for r in out if r.split == "train"}
        test_ids = {r.video_id for r in out if r.split == "test"}
        assert (len(train_ids), len(test_ids)) == (64, 16)
        assert not train_ids & test_ids
        assert len(out) == len(records)
        again = split_videos(records, 0.2, seed=12)
        assert [r.split for r in again] == [r.split for r in out]
        shuffled = split_videos(records[::-1], 0.2, seed=12)
        assert {r.video_id for r in shuffled if r.split == "test"} == test_ids
        assert {r.video_id for r in split_videos(records, 0.2, seed=13) if r.split == "test"} != test_ids
