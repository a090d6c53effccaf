import itertools
import math

import numpy as np
import pytest

import maco

TINY = {
    "seed": 3,
    "data": {"n_train": 16, "n_val": 4, "n_test": 8, "image_size": 32, "margin": 4,
             "min_radius": 2.0, "max_radius": 3.5},
    "model": {"ratio": 2, "patch_size": 4, "width": 16, "depth": 1, "heads": 2, "decoder_width": 16,
              "mlp_ratio": 2, "text_depth": 1, "max_text_len": 24, "embed_dim": 8},
    "train": {"batch_size": 8, "epochs": 1},
}


def test_config_round_trip():
    cfg = maco.default_config()
    assert cfg["seed"] == 42
    assert maco.validate_config(cfg) == cfg
    with pytest.raises(maco.Error, match="train.epoch"):
        maco.validate_config({"train": {"epoch": 3}})


def test_closed_forms():
    assert maco.softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
    for b in (2, 4, 8):
        assert abs(maco.loss_infonce(np.full((b, b), 0.3), 0.07) - math.log(b)) < 1e-12
    assert maco.loss_infonce(np.eye(2), 1.0) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    rng = np.random.default_rng(0)
    logits = rng.uniform(-1, 1, (5, 5))
    assert abs(maco.loss_masked_contrastive(logits, 0.5, np.ones(5)) - 2 * maco.loss_infonce(logits, 0.5)) < 1e-12
    np.testing.assert_allclose(maco.softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], atol=1e-15)


def test_auc_matches_pair_counting():
    for labels in itertools.product([0, 1], repeat=6):
        if len(set(labels)) < 2:
            continue
        scores = [0.1, 0.5, 0.5, 0.2, 0.9, 0.2]
        pos = [s for s, y in zip(scores, labels) if y]
        neg = [s for s, y in zip(scores, labels) if not y]
        pairs = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (len(pos) * len(neg))
        assert maco.metric_auc(scores, list(labels)) == pairs


def test_grounding_metrics_on_a_perfect_map():
    m = np.zeros((16, 16))
    m[4:8, 6:10] = 1.0
    box = [(6, 4, 4, 4)]
    assert maco.metric_pointing_game(m, box) == 1
    assert maco.metric_cnr(m, box) > 0
    assert 0 < maco.metric_miou(m, box) <= 1


def test_sample_and_model():
    s = maco.generate_sample(7, 0, TINY)
    assert s["image"].shape == (32, 32)
    assert s["report"].startswith("There is a")
    assert len(s["labels"]) == len(maco.CLASS_NAMES)

    model = maco.Model(TINY, seed=1)
    w = maco.weight_map(model.importance_weights)
    assert w.shape == (4, 4)
    np.testing.assert_allclose(w, 1 / 16, atol=1e-15)

    v = model.embed_images([s["image"]] * 2)
    t = model.embed_texts([s["report"]])
    assert v.shape == (2, 8) and t.shape == (1, 8)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(v[0], v[1])
    g = model.grounding_map(s["image"], s["phrases"][0])
    assert g.shape == (32, 32)
    scores = model.zero_shot_scores([s["image"]])
    assert scores.shape == (1, 4) and np.all((scores > 0) & (scores < 1))


def test_pretrain_and_checkpoint(tmp_path):
    model, epochs = maco.pretrain(TINY, str(tmp_path))
    assert len(epochs) == 1 and math.isfinite(epochs[0]["loss_total"])
    loaded = maco.Model.load(str(tmp_path / "checkpoint.bin"))
    s = maco.generate_sample(9, 1, TINY)
    np.testing.assert_array_equal(model.embed_images([s["image"]]), loaded.embed_images([s["image"]]))


def test_cli_in_process(tmp_path):
    cfg = dict(TINY, out_dir=str(tmp_path / "run"))
    cfg["data"] = dict(TINY["data"], dir=str(tmp_path / "data"))
    code, out, _ = maco.run_command("gen-data", cfg)
    assert code == 0 and (tmp_path / "data" / "manifest.jsonl").exists()
    code, _, err = maco.run_command("zeroshot", cfg)
    assert code == 2 and "checkpoint" in err
    code, _, err = maco.run_command("nonsense", cfg)
    assert code == 2
