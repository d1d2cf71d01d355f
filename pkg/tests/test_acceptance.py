"""End-to-end acceptance checks, one test per criterion.

A summary line per criterion is printed at the end of the pytest run.
"""

import json
import math
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from poiforecast.classifier import BASELINE, JOINT, CategoryDistribution, CategoryHead, floored_cross_entropy
from poiforecast.cli import main
from poiforecast.data import Poi, PoiSet, find_threshold_for_unseen_ratio, temporal_split
from poiforecast.encoder import ContextEncoder, SocialFusion
from poiforecast.evaluation import K_VALUES, Scenario, evaluate, sweep_unseen_ratio
from poiforecast.methods import fit_forecaster
from poiforecast.prior import DistanceBucketing, ProximityPrior, count_pairs, estimate_prior
from poiforecast.projection import UtmZone
from poiforecast.ranking import rank_joint
from poiforecast.synthetic import generate_world

from conftest import TINY, make_histories

acceptance = pytest.mark.acceptance


@pytest.fixture(scope="module")
def reports(world, world_split, trained):
    """Test-set reports for both methods, ranked against the POIs open after the swap."""
    return {m: evaluate(trained[m], world_split, K_VALUES, candidates=world.active_after_swap)
            for m in (JOINT, BASELINE)}


@acceptance(criterion=1, title="baseline scores exactly 0.0000 on unseen POIs")
def test_ac1_structural_unseen_zero(world, world_split, trained, reports):
    assert world_split.unseen_poi_ids
    assert reports[BASELINE].n_unseen_targets > 0
    assert reports[BASELINE].unseen_acc_at == {k: 0.0 for k in K_VALUES}
    # same on the full POI set and on a second split at a different unseen ratio
    full = evaluate(trained[BASELINE], world_split, K_VALUES, candidates=world.pois)
    assert full.unseen_acc_at == {k: 0.0 for k in K_VALUES}
    threshold, _ = find_threshold_for_unseen_ratio(world.histories, 0.3)
    other = temporal_split(world.histories, threshold, seed=1)
    from poiforecast.classifier import TrainConfig
    quick = fit_forecaster(BASELINE, other, world.pois, train_config=TrainConfig(max_epochs=2), seed=1)
    rep = evaluate(quick, other, K_VALUES, candidates=world.pois)
    assert rep.n_unseen_targets > 0 and rep.unseen_acc_at == {k: 0.0 for k in K_VALUES}


@acceptance(criterion=2, title="joint beats baseline on unseen targets at every k")
def test_ac2_joint_beats_baseline_unseen(reports):
    joint, base = reports[JOINT].unseen_acc_at, reports[BASELINE].unseen_acc_at
    print(f"unseen Acc@k joint {joint} baseline {base}")
    assert joint[20] > 0
    assert all(joint[k] > base[k] for k in K_VALUES)


@acceptance(criterion=3, title="synthetic Markov world, 50% swapped POIs: joint Acc@1 >= 0.70 within 5 min")
def test_ac3_synthetic_oracle(world, world_split, trained, reports):
    bayes = world.bayes_rate()
    # bound fixed from the generator before testing: Bayes rate minus 0.15 slack
    bound = round(bayes - 0.15, 2)
    assert bound == 0.70
    assert len(world.replaced) == 24 and len(world.active_after_swap) == 48
    t0 = time.perf_counter()
    report = evaluate(trained[JOINT], world_split, K_VALUES, candidates=world.active_after_swap)
    seconds = trained["joint_seconds"] + time.perf_counter() - t0
    print(f"joint Acc@1 {report.acc_at[1]:.4f} (Bayes rate {bayes:.4f}, bound {bound}); {seconds:.1f}s")
    assert report.acc_at[1] >= bound
    assert seconds <= 300


def brute_force_counts(histories, pois, width, max_km):
    n = math.ceil(max_km / width) + 1
    counts = [0] * n
    for h in histories:
        for a, b in zip(h.visits, h.visits[1:]):
            pa, pb = pois[a.poi_id], pois[b.poi_id]
            d = math.sqrt((pa.easting - pb.easting) ** 2 + (pa.northing - pb.northing) ** 2) / 1000.0
            counts[min(int(d // width), n - 1)] += 1
    return counts


@acceptance(criterion=4, title="prior counts equal brute-force pair enumeration; sums to 1")
def test_ac4_prior_oracle():
    rng = np.random.default_rng(2024)
    zone = UtmZone(18, True)
    for trial in range(25):
        n_visits = 1000 if trial % 5 == 0 else int(rng.integers(2, 1000))
        n_pois = int(rng.integers(1, 60))
        spread = float(rng.choice([2.0, 10.0, 50.0]))
        pois = PoiSet([Poi(f"p{i}", 40.7, -74.0, "c", 5e5 + x * 1000, 4.5e6 + y * 1000)
                       for i, (x, y) in enumerate(rng.uniform(0, spread, size=(n_pois, 2)))], zone)
        rows = [(f"u{rng.integers(0, 12)}", t, f"p{rng.integers(0, n_pois)}") for t in range(n_visits)]
        hist = make_histories(rows)
        width, max_km = float(rng.choice([0.25, 0.5, 1.0])), float(rng.choice([5.0, 30.0]))
        bucketing = DistanceBucketing(width, max_km)
        expected = brute_force_counts(hist, pois, width, max_km)
        assert list(count_pairs(hist, pois, bucketing)) == expected
        if sum(expected):
            prior = estimate_prior(hist, pois, bucketing, float(rng.choice([0.0, 1.0])))
            assert list(prior.counts) == expected
            assert abs(prior.probabilities.sum() - 1.0) <= 1e-9


def brute_force_joint(weights, counts, alpha, width, anchor, candidates):
    """Category probability x prior bucket in exact rational arithmetic, normalised.

    Returns exact scores and the ranking by score then poi_id.
    """
    cat_p = {c: Fraction(w) / sum(map(Fraction, weights.values())) for c, w in weights.items()}
    alpha = Fraction(alpha)
    total = sum(counts) + alpha * len(counts)
    table = [(c + alpha) / total for c in counts]
    raw = {}
    for p in candidates:
        d = math.sqrt((p.easting - anchor.easting) ** 2 + (p.northing - anchor.northing) ** 2) / 1000.0
        b = min(int(d // width), len(table) - 1)
        raw[p.poi_id] = cat_p.get(p.category_id, Fraction(0)) * table[b]
    z = sum(raw.values())
    scores = {k: v / z for k, v in raw.items()} if z > 0 else raw
    return scores, sorted(scores, key=lambda k: (-scores[k], k))


@acceptance(criterion=5, title="joint ranking equals brute-force evaluation (<= 50 candidates)")
@settings(max_examples=200, deadline=None)
@given(st.data())
def test_ac5_combiner_oracle(data):
    zone = UtmZone(18, True)
    n = data.draw(st.integers(1, 50))
    cats = ("A", "B", "C", "D")
    coord = st.floats(0, 20, allow_nan=False).map(lambda v: round(v, data.draw(st.sampled_from([0, 1, 3]))))
    rows = [(f"p{i:02d}", data.draw(coord), data.draw(coord), data.draw(st.sampled_from(cats))) for i in range(n)]
    candidates = PoiSet([Poi(pid, 40.7, -74.0, c, 5e5 + x * 1000, 4.5e6 + y * 1000) for pid, x, y, c in rows], zone)
    anchor = candidates[rows[data.draw(st.integers(0, n - 1))][0]]
    weights = data.draw(st.lists(st.sampled_from([0.0, 0.1, 0.25, 1.0, 3.0]), min_size=4, max_size=4))
    if sum(weights) == 0:
        weights[0] = 1.0
    weights = [Fraction(w).limit_denominator(100) for w in weights]
    probs = np.array([float(w) for w in weights]) / float(sum(weights))
    width = data.draw(st.sampled_from([0.5, 1.0, 2.5]))
    bucketing = DistanceBucketing(width, data.draw(st.sampled_from([5.0, 10.0, 30.0])))
    counts = tuple(data.draw(st.lists(st.integers(0, 9), min_size=bucketing.bucket_count,
                                      max_size=bucketing.bucket_count)))
    alpha = 1.0 if sum(counts) == 0 else data.draw(st.sampled_from([0.0, 1.0]))
    prior = ProximityPrior(bucketing, counts, alpha)

    r = rank_joint(CategoryDistribution(probs, cats), prior, anchor, candidates)
    scores, order = brute_force_joint(dict(zip(cats, weights)), counts, alpha, width, anchor, candidates)
    assert r.ranked_ids == order
    for pid, s in scores.items():
        assert r.score(pid) == pytest.approx(float(s), rel=1e-12, abs=1e-15)


@acceptance(criterion=5, title="joint ranking equals brute-force evaluation (<= 50 candidates)")
def test_ac5_hand_example():
    zone = UtmZone(18, True)
    pois = PoiSet([Poi("anchor", 40.7, -74.0, "A", 5e5, 4.5e6), Poi("p1", 40.7, -74.0, "A", 5e5 + 200, 4.5e6),
                   Poi("p2", 40.7, -74.0, "A", 5e5 + 1400, 4.5e6), Poi("p3", 40.7, -74.0, "B", 5e5, 4.5e6 + 2500)],
                  zone)
    prior = ProximityPrior(DistanceBucketing(1.0, 2.0), (5, 3, 2), 0.0)
    r = rank_joint(CategoryDistribution(np.array([0.6, 0.4]), ("A", "B")), prior, pois["anchor"],
                   pois.subset(["p1", "p2", "p3"]))
    assert [round(r.score(p), 4) for p in ("p1", "p2", "p3")] == [0.5357, 0.3214, 0.1429]


# --- gradient checks ----------------------------------------------------------------

def finite_difference_error(params, loss_fn, rng, n_coords=40, eps=1e-6):
    """Relative error between autograd and central differences on sampled coordinates."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic, numeric = [], []
    flat = [(p, i) for p in params for i in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    with torch.no_grad():
        for j in picks:
            p, i = flat[j]
            view = p.view(-1)
            old = view[i].item()
            view[i] = old + eps
            up = loss_fn().item()
            view[i] = old - eps
            down = loss_fn().item()
            view[i] = old
            numeric.append((up - down) / (2 * eps))
            analytic.append(p.grad.view(-1)[i].item())
    a, n = np.array(analytic), np.array(numeric)
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)


def random_window(rng, batch, n_poi, n_cat, length):
    w = TINY.window_length
    mask = np.arange(w)[None, :] >= (w - length)[:, None]
    poi = np.where(mask, rng.integers(1, n_poi, size=(batch, w)), 0)
    cat = np.where(mask, rng.integers(1, n_cat, size=(batch, w)), 0)
    tim = np.where(mask, rng.integers(1, 169, size=(batch, w)), 0)
    return [torch.from_numpy(a) for a in (poi, cat, tim, mask)]


def kink_margin(relu_inputs, loss_fn):
    """Smallest |input| reaching any ReLU during one forward pass."""
    seen = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: seen.append(out.detach().abs().min().item()))
             for m in relu_inputs]
    try:
        with torch.no_grad():
            loss_fn()
    finally:
        for h in hooks:
            h.remove()
    return min(seen)


# finite differences are meaningless across a ReLU kink, so fixtures whose
# ReLU inputs sit within this distance of zero are redrawn
KINK_MARGIN = 1e-4


@acceptance(criterion=6, title="finite-difference gradient checks, relative error <= 1e-4")
def test_ac6_gradient_checks():
    worst_model, worst_head = 0.0, 0.0
    n_poi, n_cat, n_classes, batch = 9, 6, 4, 3
    k = TINY.neighbor_count
    for fixture in range(20):
        rng = np.random.default_rng(fixture)
        torch.manual_seed(fixture)
        encoder = ContextEncoder(TINY, n_poi, n_cat).double().train()
        fusion = SocialFusion(TINY.hidden_dim, TINY.num_attention_heads).double().train()
        head = CategoryHead(TINY.hidden_dim, n_classes).double().train()
        relus = [layer.linear1 for layer in encoder.layers.layers] + [head.net[0]]
        while True:
            own_in = random_window(rng, batch, n_poi, n_cat, rng.integers(1, TINY.window_length + 1, size=batch))
            nb_in = random_window(rng, batch * k, n_poi, n_cat,
                                  rng.integers(1, TINY.window_length + 1, size=batch * k))
            nb_mask = torch.from_numpy(rng.random((batch, k)) < 0.7)
            y = torch.from_numpy(rng.integers(0, n_classes, size=batch))

            def model_loss():
                own = encoder(*own_in)
                nb = encoder(*nb_in).view(batch, k, -1)
                return floored_cross_entropy(head(fusion(own, nb, nb_mask)), y).mean()

            if kink_margin(relus, model_loss) > KINK_MARGIN:
                break
        params = [p for m in (encoder, fusion, head) for p in m.parameters()]
        worst_model = max(worst_model, finite_difference_error(params, model_loss, rng))

        while True:
            f = torch.randn(5, TINY.hidden_dim, dtype=torch.float64, requires_grad=True)
            y5 = torch.from_numpy(rng.integers(0, n_classes, size=5))
            head_loss = lambda: floored_cross_entropy(head(f), y5).mean()
            if kink_margin([head.net[0]], head_loss) > KINK_MARGIN:
                break
        worst_head = max(worst_head, finite_difference_error([*head.parameters(), f], head_loss, rng))
    print(f"max relative error: encoder+fusion+head {worst_model:.2e}, head {worst_head:.2e}")
    assert worst_model <= 1e-4 and worst_head <= 1e-4


# --- sweep ------------------------------------------------------------------------

@acceptance(criterion=7, title="unseen-ratio sweep: joint Acc@20 slope less negative than baseline's")
def test_ac7_robustness_sweep():
    def scenario(ratio):
        w = generate_world(swap_fraction=ratio, seed=0)
        return Scenario(w.pois, w.histories, w.swap_time, w.active_after_swap)

    fit = lambda name, split, pois, seed: fit_forecaster(name, split, pois, seed=seed)
    t0 = time.perf_counter()
    sweep = sweep_unseen_ratio(fit, [JOINT, BASELINE], None, None, [0.2, 0.4, 0.6, 0.8], K_VALUES,
                               seed=0, scenario=scenario)
    seconds = time.perf_counter() - t0
    for p in sweep.points:
        print(f"ratio {p.realized_ratio:.3f}: joint {p.reports[JOINT].acc_at[20]:.4f} "
              f"baseline {p.reports[BASELINE].acc_at[20]:.4f}")
    print(f"Acc@20 slopes: joint {sweep.slopes[JOINT][20]:+.4f} baseline {sweep.slopes[BASELINE][20]:+.4f}; "
          f"{seconds:.0f}s")
    assert len(sweep.points) == 4
    assert sweep.slopes[JOINT][20] > sweep.slopes[BASELINE][20]
    assert seconds <= 20 * 60


# --- full scale -------------------------------------------------------------------

def _fsnyc_path():
    candidates = [os.environ.get("POIFORECAST_FSNYC"), "data/dataset_TSMC2014_NYC.txt",
                  str(Path(__file__).resolve().parents[1] / "data" / "dataset_TSMC2014_NYC.txt")]
    return next((c for c in candidates if c and Path(c).is_file()), None)


@acceptance(criterion=8, title="full-scale FS-NYC run: joint unseen Acc@20 >= 0.12 (optional)")
def test_ac8_full_scale(tmp_path, monkeypatch):
    path = _fsnyc_path()
    if path is None:
        pytest.skip("FS-NYC check-in file not available (set POIFORECAST_FSNYC)")
    monkeypatch.delenv("POIFORECAST_OUTPUT_DIR", raising=False)
    out = str(tmp_path / "fsnyc")
    assert main(["ingest", "--data", path, "--unseen-ratio", "0.8", "--out", out]) == 0
    stats = json.loads((tmp_path / "fsnyc" / "ingest_stats.json").read_text())
    assert 0.75 <= stats["realized_unseen_ratio"] <= 0.85
    assert main(["train", "--data", path, "--unseen-ratio", "0.8", "--out", out]) == 0
    assert main(["eval", "--data", path, "--unseen-ratio", "0.8", "--out", out]) == 0
    results = json.loads((tmp_path / "fsnyc" / "results.json").read_text())
    joint = next(r for r in results["reports"] if r["method"] == JOINT)
    assert (tmp_path / "fsnyc" / "table1.csv").is_file()
    assert joint["unseen_acc_at"]["20"] >= 0.12


# --- determinism ------------------------------------------------------------------

@acceptance(criterion=9, title="identical config gives byte-identical results.json")
def test_ac9_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("POIFORECAST_OUTPUT_DIR", raising=False)
    data = tmp_path / "data"
    assert main(["synth", str(data), "--users", "24", "--visits", "40"]) == 0
    base = ["-c", str(data / "config.json"), "--max-epochs", "3"]
    sweep_args = ["--set", "sweep.ratios=[0.2,0.4]", "--max-epochs", "1"]
    blobs = {}
    for run in ("a", "b"):
        out = ["--out", str(tmp_path / run)]
        for cmd in ("ingest", "train", "eval"):
            assert main([cmd, *base, *out]) == 0
        assert main(["sweep", "-c", str(data / "config.json"), *out, *sweep_args]) == 0
        blobs[run] = ((tmp_path / run / "results.json").read_bytes(),
                      (tmp_path / run / "sweep" / "results.json").read_bytes())
    assert blobs["a"][0] == blobs["b"][0]
    assert blobs["a"][1] == blobs["b"][1]
