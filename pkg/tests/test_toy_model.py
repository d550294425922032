import math
from collections import deque
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnidist.camera_model import default_camera
from omnidist.data_io import SceneConfig, generate_scene, image_seed
from omnidist.errors import ConfigError, ShapeError
from omnidist.evaluation import iou
from omnidist.loss import LossWeights
from omnidist.normalization import NormalizationSpec
from omnidist.structures import BBox, GroundTruthObject
from omnidist.toy_model import (
    FEATURE_NAMES_GRAY,
    Batch,
    HeadConfig,
    HeadParams,
    assign_targets,
    decode,
    dihedral_box,
    dihedral_image,
    extract_features,
    forward,
    init_params,
    load_params,
    loss_and_grad,
    predict,
    prepare_example,
    save_params,
    train,
)

from oracles import gradient_check, random_gradient_case, relative_error

CAM = default_camera(128)


# --- features ----------------------------------------------------------------


def flood_labels(mask):
    """4-connected components numbered in raster order of their first pixel."""
    h, w = mask.shape
    labels = np.zeros((h, w), int)
    n = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not labels[y, x]:
                n += 1
                labels[y, x] = n
                todo = deque([(y, x)])
                while todo:
                    cy, cx = todo.popleft()
                    for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                            labels[ny, nx] = n
                            todo.append((ny, nx))
    return labels, n


def scalar_features(image, s, model):
    """Per-cell recomputation of the grayscale feature vector with explicit loops."""
    img = image.astype(float) / 255.0
    side = img.shape[0]
    cs = side // s
    pu, pv = model.principal_point
    diag = side / math.sqrt(2)
    gu = np.zeros_like(img)
    gv = np.zeros_like(img)
    for y in range(side):
        for x in range(side):
            xl, xr = max(x - 1, 0), min(x + 1, side - 1)
            yl, yr = max(y - 1, 0), min(y + 1, side - 1)
            gu[y, x] = (img[y, xr] - img[y, xl]) / (xr - xl)
            gv[y, x] = (img[yr, x] - img[yl, x]) / (yr - yl)
    med = float(np.median(img))
    fg = np.zeros_like(img, bool)
    for y in range(side):
        for x in range(side):
            fg[y, x] = abs(img[y, x] - med) > 0.15 and math.hypot(x + 0.5 - pu, y + 0.5 - pv) <= model.max_radius_px
    labels, n = flood_labels(fg)
    boxes = {}
    for y in range(side):
        for x in range(side):
            k = labels[y, x]
            if k:
                x0, y0, x1, y1 = boxes.get(k, (x, y, x + 1, y + 1))
                boxes[k] = (min(x0, x), min(y0, y), max(x1, x + 1), max(y1, y + 1))

    def logit(o):
        q = min(max(o + 0.5, 0.01), 0.99)
        return math.log(q / (1 - q))

    out = np.zeros((s, s, 16))
    for i in range(s):
        for j in range(s):
            patch = img[i * cs:(i + 1) * cs, j * cs:(j + 1) * cs]
            vals = [float(v) for v in patch.ravel()]
            mean = sum(vals) / len(vals)
            std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
            ccx, ccy = (j + 0.5) * cs, (i + 0.5) * cs
            counts = {}
            for y in range(i * cs, (i + 1) * cs):
                for x in range(j * cs, (j + 1) * cs):
                    if labels[y, x]:
                        counts[labels[y, x]] = counts.get(labels[y, x], 0) + 1
            eu = ev = 0.0
            ew = eh = 1.0 / cs
            if counts:
                best = min(counts, key=lambda k: (-counts[k], k))
                x0, y0, x1, y1 = boxes[best]
                eu, ev = (x0 + x1) / 2 / cs - (j + 0.5), (y0 + y1) / 2 / cs - (i + 0.5)
                ew, eh = (x1 - x0) / cs, (y1 - y0) / cs
            er = math.hypot(ccx + eu * cs - pu, ccy + ev * cs - pv) / diag
            phi = math.atan2(ccy - pv, ccx - pu)
            out[i, j] = [
                mean, std,
                float(np.mean(np.abs(gu[i * cs:(i + 1) * cs, j * cs:(j + 1) * cs]))),
                float(np.mean(np.abs(gv[i * cs:(i + 1) * cs, j * cs:(j + 1) * cs]))),
                math.hypot(ccx - pu, ccy - pv) / diag, math.sin(phi), math.cos(phi),
                sum(counts.values()) / cs**2, logit(eu), logit(ev), abs(eu), abs(ev),
                math.log(ew), math.log(eh), er, er * er,
            ]
    return out


def test_features_match_scalar_recomputation():
    cfg = HeadConfig()
    image, _ = generate_scene(image_seed(1, 0), CAM, SceneConfig(image_side_px=128, distance_m=(1.5, 4.0),
                                                                 object_count=(2, 3), min_gap_px=2.0))
    got = extract_features(image, cfg, CAM)
    want = scalar_features(image, cfg.grid_size, CAM)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    assert got[..., 7].max() > 0  # the scene has foreground


def test_feature_names_cover_grayscale_vector():
    assert len(FEATURE_NAMES_GRAY) == HeadConfig().feature_dim


def test_constant_image():
    f = extract_features(np.full((64, 64), 90, np.uint8), HeadConfig(), None)
    assert np.all(f[..., 2:4] == 0)
    assert np.all(f[..., 0] == f[0, 0, 0])
    assert np.all(f[..., 7] == 0)


def test_radial_feature_extremes():
    cfg = HeadConfig(grid_size=5)
    f = extract_features(np.zeros((100, 100), np.uint8), cfg, None)
    assert f[2, 2, 4] == pytest.approx(0.0, abs=1e-15)
    assert f[0, 0, 4] == pytest.approx(1 - 1 / 5)
    assert f[4, 4, 4] == pytest.approx(1 - 1 / 5)


def test_feature_padding_and_truncation():
    img = np.zeros((64, 64), np.uint8)
    assert extract_features(img, HeadConfig(feature_dim=20), None).shape == (8, 8, 20)
    assert np.all(extract_features(img, HeadConfig(feature_dim=20), None)[..., 16:] == 0)
    np.testing.assert_array_equal(extract_features(img, HeadConfig(feature_dim=6), None),
                                  extract_features(img, HeadConfig(), None)[..., :6])


def test_rgb_features():
    img = np.zeros((64, 64, 3), np.uint8)
    img[..., 0] = 255
    f = extract_features(img, HeadConfig(feature_dim=24), None)
    assert f[0, 0, :3].tolist() == [1.0, 0.0, 0.0]


@pytest.mark.parametrize("shape", [(64, 48), (60, 60), (4, 4, 4, 4)])
def test_feature_shape_errors(shape):
    with pytest.raises(ShapeError):
        extract_features(np.zeros(shape, np.uint8), HeadConfig(), None)


# --- forward and decode ----------------------------------------------------------


def test_forward_zero_weights_gives_bias():
    cfg = HeadConfig()
    p = HeadParams(np.zeros((1, cfg.outputs, 16)), np.arange(cfg.outputs, dtype=float)[None])
    out = forward(p, np.random.default_rng(0).normal(size=(8, 8, 16)))
    assert np.all(out == np.arange(cfg.outputs))


def test_forward_one_hot_picks_column():
    w = np.random.default_rng(1).normal(size=(2, 7, 16))
    p = HeadParams(w, np.zeros((2, 7)))
    f = np.zeros(16)
    f[5] = 1.0
    np.testing.assert_array_equal(forward(p, f), w[:, :, 5])


def test_forward_matches_loops():
    rng = np.random.default_rng(2)
    p = HeadParams(rng.normal(size=(2, 7, 16)), rng.normal(size=(2, 7)), feature_shift=rng.normal(size=16),
                   feature_scale=rng.uniform(0.5, 2, size=16))
    x = rng.normal(size=(3, 4, 16))
    out = forward(p, x)
    for i in range(3):
        for j in range(4):
            for a in range(2):
                for k in range(7):
                    ref = sum(p.weight[a, k, f] * (x[i, j, f] - p.feature_shift[f]) / p.feature_scale[f]
                              for f in range(16)) + p.bias[a, k]
                    assert out[i, j, a, k] == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(HeadParams(np.zeros((1, 7, 16)), np.zeros((1, 7))), np.zeros((8, 8, 15)))


def one_cell(cfg, i, j, **logits):
    raw = np.full((cfg.grid_size, cfg.grid_size, 1, cfg.outputs), -20.0)
    raw[i, j, 0, :4] = 0.0
    raw[i, j, 0, 4:] = 10.0
    raw[i, j, 0, 5 + cfg.num_classes] = 0.0
    for k, v in logits.items():
        raw[i, j, 0, {"tx": 0, "ty": 1, "tw": 2, "th": 3, "obj": 4, "dist": 5 + cfg.num_classes}[k]] = v
    return raw


def test_decode_cell_midpoint_and_anchor_size():
    cfg = HeadConfig(anchors=((20.0, 12.0),))
    (d,) = decode(one_cell(cfg, 2, 5), cfg, 128)
    assert (d.bbox.cx, d.bbox.cy) == (5.5 * 16, 2.5 * 16)
    assert (d.bbox.w, d.bbox.h) == (20.0, 12.0)


def test_decode_distance_midpoint():
    cfg = HeadConfig(norm_spec=NormalizationSpec("linear", 100.0))
    (d,) = decode(one_cell(cfg, 0, 0), cfg, 128)
    assert d.distance_m == pytest.approx(50.0)


def test_decode_clamps_box_logits():
    cfg = HeadConfig()
    (d,) = decode(one_cell(cfg, 1, 1, tw=50.0), cfg, 128)
    assert d.bbox.w == pytest.approx(16.0 * math.exp(4.0))


def test_decode_threshold_is_strict():
    cfg = HeadConfig()
    raw = np.zeros((8, 8, 1, cfg.outputs))  # sigma(0) * sigma(0) = 0.25 everywhere
    assert decode(raw, cfg, 128) == []
    raw[3, 3, 0, 4] = 1e-6
    assert len(decode(raw, cfg, 128)) == 1


def test_decode_suppresses_overlaps():
    cfg = HeadConfig()
    raw = one_cell(cfg, 2, 2, tx=2.0, obj=5.0)
    raw[2, 3, 0] = raw[2, 2, 0]
    raw[2, 3, 0, 0] = -2.0
    raw[2, 3, 0, 4] = 3.0
    dets = decode(raw, cfg, 128)
    assert len(dets) == 1 and dets[0].confidence > 0.9


@settings(max_examples=40)
@given(st.integers(0, 2**31))
def test_decode_ranges(seed):
    cfg = HeadConfig(num_classes=3, norm_spec=NormalizationSpec("log", 36.0))
    raw = np.random.default_rng(seed).normal(0, 6, size=(8, 8, 1, cfg.outputs))
    for d in decode(raw, cfg, 128):
        assert 0 <= d.confidence <= 1 and 0 <= d.distance_m <= 36.0
        assert d.bbox.w > 0 and d.bbox.h > 0 and 0 <= d.class_id < 3


# --- targets ---------------------------------------------------------------------


def test_centred_gt_goes_to_middle_cell():
    cfg = HeadConfig(grid_size=5)
    t = assign_targets([GroundTruthObject(0, BBox(50, 50, 10, 10), 3.0)], cfg, 100)
    assert t.obj[2, 2, 0] == 1 and t.obj.sum() == 1


@pytest.mark.parametrize("order", [(5.0, 9.0), (9.0, 5.0)])
def test_nearer_gt_wins_cell(order):
    gts = [GroundTruthObject(0, BBox(20 + k, 20, 8, 8), d) for k, d in enumerate(order)]
    t = assign_targets(gts, HeadConfig(), 128)
    assert t.dist_m[1, 1, 0] == 5.0


def test_assignment_matches_rescan():
    cfg = HeadConfig()
    for n in range(50):
        rng = np.random.default_rng(n)
        gts = [GroundTruthObject(0, BBox(*rng.uniform(0, 127.9, 2), 8, 8), float(rng.choice([2.0, 3.0, 4.0])))
               for _ in range(int(rng.integers(0, 12)))]
        t = assign_targets(gts, cfg, 128)
        for i in range(8):
            for j in range(8):
                inside = [k for k, g in enumerate(gts)
                          if j * 16 <= g.bbox.cx < (j + 1) * 16 and i * 16 <= g.bbox.cy < (i + 1) * 16]
                want = min(inside, key=lambda k: (gts[k].distance_m, k)) if inside else -1
                assert t.gt_index[i, j, 0] == want


def test_anchor_choice_by_shape():
    cfg = HeadConfig(anchors=((16.0, 16.0), (8.0, 32.0)))
    t = assign_targets([GroundTruthObject(0, BBox(40, 40, 7, 30), 2.0)], cfg, 128)
    assert t.obj[2, 2, 1] == 1 and t.obj[2, 2, 0] == 0


# --- objective ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_full_gradient_matches_finite_differences(seed):
    params, batch, cfg = random_gradient_case(np.random.default_rng(seed))
    analytic, numeric = gradient_check(params, batch, cfg)
    assert relative_error(analytic, numeric) <= 1e-4


def test_gradient_without_height_head():
    params, batch, cfg = random_gradient_case(np.random.default_rng(9), height_head=False)
    analytic, numeric = gradient_check(params, batch, cfg)
    assert relative_error(analytic, numeric) <= 1e-4


def test_exact_distance_gives_zero_dist_loss():
    params, batch, cfg = random_gradient_case(np.random.default_rng(3), height_head=False)
    x = params.standardize(batch.features)
    raw = forward(params, batch.features)
    pos = np.stack([t.obj for t in batch.targets]) > 0
    k = 5 + cfg.num_classes
    # set each positive's distance target to the model's own prediction
    for b, t in enumerate(batch.targets):
        y = 1 / (1 + np.exp(-raw[b, ..., k]))
        t.dist_m = np.where(t.obj > 0, y * cfg.norm_spec.d_max, 0.0)
    loss, _ = loss_and_grad(params, batch, cfg)
    assert loss.dist == pytest.approx(0.0, abs=1e-12)
    assert pos.any() and x.shape[0] == len(batch.targets)


def test_doubling_distance_weight():
    params, batch, cfg = random_gradient_case(np.random.default_rng(4), height_head=False)
    w = cfg.weights
    doubled = replace(cfg, weights=LossWeights(w.lambda_obj, w.lambda_cls, w.lambda_loc, 2 * w.lambda_dist))
    zero = replace(cfg, weights=LossWeights(w.lambda_obj, w.lambda_cls, w.lambda_loc, 0.0))
    l1, g1 = loss_and_grad(params, batch, cfg)
    l2, g2 = loss_and_grad(params, batch, doubled)
    l0, g0 = loss_and_grad(params, batch, zero)
    assert l2.total - l1.total == pytest.approx(w.lambda_dist * l1.dist, rel=1e-12)
    k = 5 + cfg.num_classes
    others = [r for r in range(cfg.outputs) if r != k]
    np.testing.assert_array_equal(g2.weight[:, others], g1.weight[:, others])
    np.testing.assert_allclose(g2.weight[:, k], 2 * g1.weight[:, k], rtol=1e-12)
    assert np.all(g0.weight[:, k] == 0)


def test_height_weights_default_with_head():
    assert HeadConfig(enable_height_head=True).weights == LossWeights.default(height_head=True)
    assert HeadConfig().weights.lambda_ad == 0.0


def test_empty_batch_rejected():
    cfg = HeadConfig()
    with pytest.raises(ShapeError):
        loss_and_grad(init_params(cfg), Batch(np.zeros((0, 8, 8, 16)), [], 128.0), cfg)


def rotation_compatible_params(cfg, rng):
    """Weights that only read rotation-invariant features and predict square boxes at cell centres."""
    invariant = [0, 1, 4, 7, 14, 15]  # mean, std, radial, fg mass, extent radial and its square
    w = np.zeros((1, cfg.outputs, cfg.feature_dim))
    w[0][:, invariant] = rng.normal(0, 0.5, size=(cfg.outputs, len(invariant)))
    w[0, 0:2] = 0.0  # box centre stays at the cell centre
    w[0, 3] = w[0, 2]  # tw == th keeps the square anchor square
    b = rng.normal(0, 0.3, size=(1, cfg.outputs))
    b[0, 0:2] = 0.0
    b[0, 3] = b[0, 2]
    hw = np.zeros(cfg.feature_dim)
    hw[invariant] = rng.normal(0, 0.5, size=len(invariant))
    return HeadParams(w, b, hw, 0.3)


@pytest.mark.parametrize("k,flip", [(1, False), (2, False), (3, True), (0, True)])
def test_loss_invariant_under_dihedral_augmentation(tiny_dataset, k, flip):
    from omnidist.projection import read_raster

    cfg = HeadConfig(enable_height_head=True)
    params = rotation_compatible_params(cfg, np.random.default_rng(k))
    rec = next(r for r in tiny_dataset.records if len(r.objects) >= 2)
    image = read_raster(tiny_dataset.root / rec.image)
    cam = tiny_dataset.camera_for(rec)
    base = prepare_example(image, rec.objects, cfg, cam, 0, False, 2.5)
    moved = prepare_example(image, rec.objects, cfg, cam, k, flip, 2.5)
    l0, _ = loss_and_grad(params, Batch(base.features[None], [base.targets], 128.0), cfg)
    l1, _ = loss_and_grad(params, Batch(moved.features[None], [moved.targets], 128.0), cfg)
    assert l1.total == pytest.approx(l0.total, rel=1e-9)
    assert base.targets.obj.sum() == moved.targets.obj.sum()


def test_dihedral_box_follows_image():
    img = np.zeros((16, 16), np.uint8)
    img[2:5, 9:15] = 255  # box centre (12, 3.5), 6 x 3
    box = BBox(12, 3.5, 6, 3)
    for k in range(4):
        for flip in (False, True):
            out = dihedral_image(img, k, flip)
            ys, xs = np.nonzero(out)
            moved = dihedral_box(box, 16, k, flip)
            assert moved.corners == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


# --- training ------------------------------------------------------------------------


def test_zero_learning_rate_keeps_params(tiny_dataset):
    cfg = HeadConfig(learning_rate=0.0, steps=20)
    r = train(tiny_dataset, cfg)
    start = init_params(cfg)
    np.testing.assert_array_equal(r.params.weight, start.weight)
    np.testing.assert_array_equal(r.params.bias, start.bias)
    assert len({m for m in r.val_mae}) == 1 and r.val_mae[0] == r.initial_val_mae


def test_training_is_deterministic(tiny_dataset):
    cfg = HeadConfig(steps=60, seed=3)
    a, b = train(tiny_dataset, cfg), train(tiny_dataset, cfg)
    assert a.history == b.history and a.val_mae == b.val_mae
    assert a.params.weight.tobytes() == b.params.weight.tobytes()


def test_validation_split_is_disjoint(tiny_dataset):
    r = train(tiny_dataset, HeadConfig(steps=0))
    assert not set(r.train_indices) & set(r.val_indices)
    assert len(r.train_indices) + len(r.val_indices) == 24


def test_loss_trend_on_synthetic_data(tiny_dataset):
    r = train(tiny_dataset, HeadConfig(steps=400, anchors=((8.0, 8.0),)))
    totals = [h.total for h in r.history]
    tenth = len(totals) // 10
    assert np.median(totals[-tenth:]) < np.median(totals[:tenth])


def test_bad_config():
    with pytest.raises(ConfigError):
        HeadConfig(grid_size=2)
    with pytest.raises(ConfigError):
        HeadConfig(representation="cubemap")
    with pytest.raises(ConfigError):
        HeadConfig.from_dict({"bogus": 1})


def test_config_round_trip():
    cfg = HeadConfig(anchors=((8, 8), (12, 20)), norm_spec=NormalizationSpec("log", 36.0), enable_height_head=True)
    assert HeadConfig.from_dict(cfg.to_dict()) == cfg


def test_params_round_trip(tmp_path):
    cfg = HeadConfig(enable_height_head=True)
    p = init_params(cfg)
    p.feature_shift, p.feature_scale = np.ones(16), np.full(16, 2.0)
    save_params(p, tmp_path / "p.npz")
    q = load_params(tmp_path / "p.npz")
    np.testing.assert_array_equal(q.flat(), p.flat())
    np.testing.assert_array_equal(q.feature_scale, p.feature_scale)


# --- prediction ------------------------------------------------------------------------


def test_untrained_zero_params_predict_nothing():
    cfg = HeadConfig()
    p = HeadParams(np.zeros((1, cfg.outputs, 16)), np.zeros((1, cfg.outputs)))
    image, _ = generate_scene(image_seed(0, 0), CAM, SceneConfig(image_side_px=128, distance_m=(1.5, 4.0)))
    assert predict(p, image, cfg, CAM) == ([], None)


def test_height_head_estimate(tiny_dataset):
    from omnidist.projection import read_raster

    cfg = HeadConfig(enable_height_head=True, anchors=((8.0, 8.0),))
    r = train(tiny_dataset, cfg)
    est = []
    for i in r.val_indices:
        rec = tiny_dataset.records[i]
        _, h = predict(r.params, read_raster(tiny_dataset.root / rec.image), cfg, tiny_dataset.camera_for(rec))
        est.append(h)
    assert abs(np.mean(est) - 2.5) <= 1.0


@pytest.mark.slow
def test_trained_head_finds_single_objects(gate_run):
    dataset, images, cfg, result = gate_run
    single = [i for i in result.val_indices if len(dataset.records[i].objects) == 1]
    hits = []
    for i in single:
        rec = dataset.records[i]
        dets, _ = predict(result.params, images[i], cfg, dataset.camera_for(rec))
        hits.append(any(iou(d.bbox, rec.objects[0].bbox) >= 0.5 for d in dets))
    assert single and hits[0]
    assert np.mean(hits) >= 0.8
