"""End-to-end acceptance gate.

Each test covers one acceptance criterion at its pinned tolerance and prints
a single [PASS]/[FAIL] line (visible even under captured output).  The suite
relies on the committed fixtures under fixtures/ produced by the exporter.
"""
import contextlib
import hashlib
import os
import time

import numpy as np
import pytest

from cnndecomp.compose import (
    VOTE_LOGIT, VOTE_PROB, ModuleLabel, ModuleSet, compose_predict, continual_update,
    module_score, remove, replace,
)
from cnndecomp.concern import ci_run, ti_plan, ti_run
from cnndecomp.concernmap import ConcernMap, propagate_positions
from cnndecomp.graph import LabeledDataset, infer_shapes, load_dataset, load_model
from cnndecomp.inference import forward
from cnndecomp.metrics import co2e_from_powers, evaluate, jaccard
from cnndecomp.modularize import PIPELINE_BLN, build_module, load_module, mc_bi
from cnndecomp.tensors import ConvParams, Padding, conv2d, pool2d, PoolMode
from cnndecomp import cli

from conftest import make_dataset, make_small_cnn, require_fixture
from oracles import naive_conv2d, naive_pool2d, naive_window_pairs
from test_modularize import bare_module, conv_chain_model


@contextlib.contextmanager
def criterion(capsys, name):
    try:
        yield
    except BaseException:
        with capsys.disabled():
            print(f"\n[FAIL] {name}", flush=True)
        raise
    with capsys.disabled():
        print(f"\n[PASS] {name}", flush=True)


_CACHE: dict[str, object] = {}


@pytest.fixture(scope="session")
def weak_fixture():
    model = load_model(require_fixture("plain-a-weak.cnnmod"))
    train = load_dataset(require_fixture("syntha.train.cnnds"))
    test = load_dataset(require_fixture("syntha.test.cnnds"))
    return model, train, test


@pytest.fixture(scope="session")
def plain_b_fixture():
    model = load_model(require_fixture("plain-b.cnnmod"))
    train = load_dataset(require_fixture("synthb.train.cnnds"))
    test = load_dataset(require_fixture("synthb.test.cnnds"))
    return model, train, test


def model_top1(model, dataset):
    hits = sum(forward(model, x).argmax == int(y)
               for x, y in zip(dataset.images, dataset.labels))
    return hits / len(dataset.labels)


def build_set(model, train, n_inputs, jobs=1):
    modules = [build_module(model, train, cls, n_inputs,
                            pipeline=PIPELINE_BLN, jobs=jobs)
               for cls in range(model.class_count)]
    return ModuleSet(modules=modules)


def test_conv_pool_oracle_exhaustive(capsys):
    with criterion(capsys, "conv/pool oracle: exhaustive sweep H,W<=6 kh,kw<=3 "
                           "c<=3 stride {1,2}, both paddings, 1e-9 relative, <10s"):
        rng = np.random.default_rng(0)
        started = time.monotonic()
        checked = 0
        for padding in (Padding.WITH, Padding.ZERO):
            for stride in (1, 2):
                for h in range(1, 7):
                    for w in range(1, 7):
                        for kh in range(1, 4):
                            for kw in range(1, 4):
                                if padding is Padding.ZERO and (kh > h or kw > w):
                                    continue
                                for c_in in (1, 2, 3):
                                    c_out = (c_in % 3) + 1
                                    x = rng.normal(0, 1, (h, w, c_in)).astype(np.float32)
                                    p = ConvParams(
                                        kernel=rng.normal(0, 1, (kh, kw, c_in, c_out))
                                        .astype(np.float32),
                                        bias=rng.normal(0, 1, c_out).astype(np.float32),
                                        stride=stride, padding=padding)
                                    got = conv2d(x, p)
                                    want = naive_conv2d(x, p.kernel, p.bias, stride,
                                                        padding is Padding.WITH)
                                    np.testing.assert_allclose(got, want, rtol=1e-9,
                                                               atol=1e-12)
                                    checked += 1
        for h, w in ((2, 2), (4, 4), (6, 6), (4, 6)):
            for pool in (2, 3):
                if h % pool or w % pool:
                    continue
                for c in (1, 2, 3):
                    x = rng.normal(0, 1, (h, w, c)).astype(np.float32)
                    for mode, name in ((PoolMode.MAX, "max"), (PoolMode.AVG, "avg")):
                        np.testing.assert_allclose(pool2d(x, pool, mode),
                                                   naive_pool2d(x, pool, name),
                                                   rtol=1e-9, atol=0)
                        checked += 1
        elapsed = time.monotonic() - started
        assert checked > 3000
        assert elapsed < 10.0, f"sweep took {elapsed:.1f}s"


def test_argmax_preservation(capsys, plain_fixture):
    model, _, test = plain_fixture
    with criterion(capsys, "argmax preservation: empty maps + raw-logit voting "
                           "reproduce the model's top-1 exactly"):
        from test_compose import full_set
        mset = full_set(model, provenance="syntha")
        for x in test.images:
            logits = forward(model, x).logits
            top = np.flatnonzero(logits == logits.max())
            if len(top) > 1:
                continue  # tie-free inputs only
            ranking = compose_predict(mset, x, VOTE_LOGIT)
            assert ranking[0][0].class_id == int(top[0])
            for label, score in ranking:
                assert score == float(logits[label.class_id])


def test_ci_semantics_50_traces(capsys, plain_fixture):
    model, train, _ = plain_fixture
    with criterion(capsys, "CI semantics: map equals brute-force intersection of "
                           "50 per-input {<=0} sets, exactly"):
        cmap = ci_run(model, train, 0, 50)
        images = train.images[train.class_indices(0)[:50]]
        conv_idxs = model.conv_indices()
        for i in conv_idxs + model.hidden_dense_indices():
            expected = None
            for x in images:
                dead = set(np.flatnonzero(
                    forward(model, x).trace[i].reshape(-1) <= 0).tolist())
                expected = dead if expected is None else (expected & dead)
            table = cmap.conv_inactive if i in conv_idxs else cmap.dense_inactive
            assert table[i] == expected


def test_ti_arithmetic_and_shrinkage(capsys):
    with criterion(capsys, "TI arithmetic: 200 classes/1000 concerned -> 5 each, "
                           "995 total; monotone shrinkage on 20 runs"):
        from test_concern import labels_only_dataset
        ds = labels_only_dataset(np.tile(np.arange(200), 5), 200)
        plan = ti_plan(ds, 0, 1000)
        assert plan.per_unconcerned_count == 5
        assert plan.total_unconcerned == 995

        runs = 0
        for seed in range(5):
            model = make_small_cnn(seed=seed)
            data = make_dataset(model, per_class=8, seed=seed + 50)
            for cls in range(model.class_count):
                cmap = ci_run(model, data, cls, 6)
                refined = ti_run(cmap, model, data, ti_plan(data, cls, 6))
                for i, positions in refined.conv_inactive.items():
                    assert positions <= cmap.conv_inactive[i]
                for i, nodes in refined.dense_inactive.items():
                    assert nodes <= cmap.dense_inactive[i]
                runs += 1
        assert runs == 20


def test_mc_bi_oracle_sweep(capsys):
    with criterion(capsys, "MC-BI oracle: all sweep conv configs x 100 random "
                           "deactivation sets match the enumeration oracle, <60s"):
        rng = np.random.default_rng(7)
        started = time.monotonic()
        configs = 0
        for padding in (Padding.WITH, Padding.ZERO):
            for stride in (1, 2):
                for h in range(1, 7):
                    for w in range(1, 7):
                        for kh in range(1, 4):
                            for kw in range(1, 4):
                                if padding is Padding.ZERO and (kh > h or kw > w):
                                    continue
                                for c_in in (1, 2, 3):
                                    c_out = (c_in % 3) + 1
                                    p = ConvParams(
                                        kernel=rng.normal(0, 1, (kh, kw, c_in, c_out))
                                        .astype(np.float32),
                                        bias=np.zeros(c_out, dtype=np.float32),
                                        stride=stride, padding=padding)
                                    model = conv_chain_model([p], class_count=2,
                                                             input_shape=(h, w, c_in))
                                    module = bare_module(model, ConcernMap())
                                    pairs, (oh, ow) = naive_window_pairs(
                                        (h, w, c_in), kh, kw, stride,
                                        padding is Padding.WITH)
                                    sid = np.array([s for s, _ in pairs], dtype=np.int64)
                                    sink = np.array([k for _, k in pairs], dtype=np.int64)
                                    all_ids = np.unique(sid[sid != 0])
                                    size = oh * ow * c_out
                                    for _ in range(100):
                                        mask = rng.random(size) < rng.uniform(0, 1)
                                        deact = set(np.flatnonzero(mask).tolist())
                                        module.map = ConcernMap(
                                            conv_inactive={0: set(deact)})
                                        got = mc_bi(model, module).map.input_positions
                                        dead_spatial = mask.reshape(oh * ow, c_out) \
                                            .all(axis=1)
                                        alive = np.unique(sid[(sid != 0)
                                                              & ~dead_spatial[sink]])
                                        want = set((np.setdiff1d(all_ids, alive,
                                                                 assume_unique=True)
                                                    - 1).tolist())
                                        assert got == want
                                    configs += 1
        elapsed = time.monotonic() - started
        assert configs > 1000
        assert elapsed < 60.0, f"sweep took {elapsed:.1f}s"


def test_pooling_propagation_exact(capsys, plain_fixture):
    model, _, _ = plain_fixture
    with criterion(capsys, "pooling propagation: one flatten-level removal yields "
                           "exactly pool_size^2 positions"):
        shapes = infer_shapes(model)
        flatten_idx = 6
        conv2_idx = 3
        pool = model.layers[5].pool
        union = set()
        for pos in range(shapes[flatten_idx][0]):
            cmap = ConcernMap()
            propagate_positions(model, cmap, flatten_idx, {pos}, shapes)
            assert set(cmap.conv_inactive) == {conv2_idx}
            assert len(cmap.conv_inactive[conv2_idx]) == pool * pool
            union |= cmap.conv_inactive[conv2_idx]
        assert union == set(range(int(np.prod(shapes[conv2_idx]))))


def test_desk_scale_decomposition(capsys, plain_fixture):
    model, train, test = plain_fixture
    with criterion(capsys, "desk scale: composed CI+TI+MC-BLN top-1 within 5pp of "
                           "the model, JI<1 for >=9/10, <5min on 4 cores"):
        base_top1 = model_top1(model, test)
        assert base_top1 >= 0.80, f"fixture accuracy {base_top1:.3f} below floor"

        started = time.monotonic()
        mset = build_set(model, train, n_inputs=500, jobs=4)
        elapsed = time.monotonic() - started
        assert elapsed < 300.0, f"decomposition took {elapsed:.1f}s"
        _CACHE["strong_set"] = mset

        report = evaluate(mset, [test], mode=VOTE_PROB, jobs=4)
        assert report.top1 >= base_top1 - 0.05, (
            f"composed {report.top1:.3f} vs model {base_top1:.3f}")
        below_one = sum(1 for ji in report.jaccard.values() if ji < 1.0)
        assert below_one >= 9, f"only {below_one}/10 modules have JI < 1"


def test_scenario_suite(capsys, plain_fixture, weak_fixture, plain_b_fixture):
    model, train, test = plain_fixture
    weak_model, _, _ = weak_fixture
    model_b, train_b, test_b = plain_b_fixture
    with criterion(capsys, "scenario suite: remove excludes label, replace does "
                           "not reduce mean accuracy, CL >= no-CL on >=60% of pairs"):
        strong = _CACHE.get("strong_set") or build_set(model, train, 500, jobs=4)

        # Option 3: removal excludes the label
        dropped = remove(strong, ModuleLabel("syntha", 4))
        assert ModuleLabel("syntha", 4) not in dropped.labels
        kept = LabeledDataset(
            name=test.name, split=test.split, class_count=test.class_count,
            images=test.images[test.labels != 4], labels=test.labels[test.labels != 4])
        assert evaluate(dropped, [kept], mode=VOTE_PROB).n_examples == len(kept.labels)

        # Options 1-2: replacing a degraded module with a better one, 10 trials
        weak_set = build_set(weak_model, train, n_inputs=500, jobs=4)
        before, after = [], []
        for cls in range(model.class_count):
            label = ModuleLabel("syntha", cls)
            degraded = replace(strong, label, weak_set.modules[cls])
            before.append(evaluate(degraded, [test], mode=VOTE_PROB, jobs=4).top1)
            repaired = replace(degraded, label, strong.modules[cls])
            after.append(evaluate(repaired, [test], mode=VOTE_PROB, jobs=4).top1)
        mean_before = sum(before) / len(before)
        mean_after = sum(after) / len(after)
        assert mean_after >= mean_before - 1e-9, (
            f"mean after {mean_after:.4f} < before {mean_before:.4f}")

        # inter-dataset reuse with and without continual learning
        set_b = build_set(model_b, train_b, n_inputs=100, jobs=4)
        _CACHE["set_b"] = set_b

        def pair_accuracy(mod_a, mod_b, cls_a, cls_b):
            examples = [(x, 0) for x in test.images[test.labels == cls_a][:20]]
            examples += [(x, 1) for x in test_b.images[test_b.labels == cls_b]]
            hits = 0
            for x, truth in examples:
                scores = (module_score(mod_a, x), module_score(mod_b, x))
                hits += int(np.argmax(scores)) == truth
            return hits / len(examples)

        wins = total = 0
        for cls_a in range(10):
            mod_a = strong.modules[cls_a]
            foreign_a = list(train.images[train.class_indices(cls_a)[:50]])
            for cls_b in range(10):
                mod_b = set_b.modules[cls_b]
                foreign_b = list(train_b.images[train_b.class_indices(cls_b)[:50]])
                baseline = pair_accuracy(mod_a, mod_b, cls_a, cls_b)
                cl_a = continual_update(mod_a, foreign_b)
                cl_b = continual_update(mod_b, foreign_a)
                with_cl = pair_accuracy(cl_a, cl_b, cls_a, cls_b)
                wins += with_cl >= baseline
                total += 1
        assert total == 100
        assert wins / total >= 0.60, f"CL >= no-CL on only {wins}/{total} pairs"


def test_co2e_pinned(capsys):
    with criterion(capsys, "CO2e: (1h, 800+200W, g=0) = (1.58 kWh, 1.50732 lbs) "
                           "to 1e-9; linearity holds"):
        kwh, lbs = co2e_from_powers(800.0, 200.0, 0.0, 0, 1.0)
        assert abs(kwh - 1.58) < 1e-9
        assert abs(lbs - 1.50732) < 1e-9
        for scale in (0.5, 2.0, 7.25):
            k2, l2 = co2e_from_powers(800.0, 200.0, 0.0, 0, scale)
            assert abs(k2 - scale * kwh) < 1e-9
            assert abs(l2 - scale * lbs) < 1e-9
            k3, l3 = co2e_from_powers(800.0 * scale, 200.0 * scale, 0.0, 0, 1.0)
            assert abs(k3 - scale * kwh) < 1e-9
            assert abs(l3 - scale * lbs) < 1e-9


def test_determinism(capsys, tmp_path, plain_fixture):
    model, train, _ = plain_fixture
    with criterion(capsys, "determinism: repeated decompose runs byte-identical; "
                           "1-worker and 4-worker runs agree"):
        model_path = require_fixture("plain-a.cnnmod")
        data_path = require_fixture("syntha.train.cnnds")
        outputs = []
        for run in ("one", "two"):
            out_dir = tmp_path / run
            rc = cli.main(["decompose", "--model", model_path, "--data", data_path,
                           "--classes", "0,1", "--n-inputs", "100",
                           "--out-dir", str(out_dir), "--jobs", "1"])
            assert rc == 0
            outputs.append({name: (out_dir / name).read_bytes()
                            for name in sorted(os.listdir(out_dir))})
        assert outputs[0] == outputs[1]

        from cnndecomp.modularize import dump_module_bytes
        serial = build_module(model, train, 3, 200, jobs=1)
        parallel = build_module(model, train, 3, 200, jobs=4)
        assert dump_module_bytes(serial) == dump_module_bytes(parallel)


def test_secondary_probe_agreement(capsys):
    with criterion(capsys, "secondary: exporter fixtures load with probe-logit "
                           "agreement <= 1e-4 (PlainCNN and TinyResNet); manifest "
                           "hash covers all files"):
        for name, dataset in (("plain-a", "syntha"), ("resnet-a", "syntha"),
                              ("plain-a-weak", "syntha"), ("plain-b", "synthb")):
            model = load_model(require_fixture(f"{name}.cnnmod"))
            test = load_dataset(require_fixture(f"{dataset}.test.cnnds"))
            lines = open(require_fixture(f"{name}.manifest.txt")).read() \
                .rstrip("\n").split("\n")
            assert lines[0] == "CNNFIXTURE v1"

            probes = 0
            for line in lines:
                if line.startswith("probe "):
                    tokens = line.split()
                    cls, idx = int(tokens[1]), int(tokens[2])
                    want = np.array([float(v) for v in tokens[3:]])
                    assert int(test.labels[idx]) == cls
                    got = forward(model, test.images[idx]).logits
                    assert np.abs(got - want).max() <= 1e-4
                    probes += 1
            assert probes == 10

            # the trailing hash covers every preceding line, and the recorded
            # file hashes match the files on disk
            assert lines[-1].startswith("manifest_sha256 ")
            body = ("\n".join(lines[:-1]) + "\n").encode("utf-8")
            assert lines[-1].split()[1] == hashlib.sha256(body).hexdigest()
            for line in lines:
                if line.startswith(("model ", "dataset ")):
                    _, fname, digest = line.split()
                    payload = open(require_fixture(fname), "rb").read()
                    assert digest == f"sha256={hashlib.sha256(payload).hexdigest()}"
