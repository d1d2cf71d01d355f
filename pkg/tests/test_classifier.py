import math

import numpy as np
import pytest
import torch

from poiforecast.classifier import (BASELINE, JOINT, CategoryDistribution, CategoryHead, TrainConfig,
                                    category_loss, floored_cross_entropy, load_checkpoint, predict_category,
                                    save_checkpoint, softmax64, train)
from poiforecast.data import temporal_split
from poiforecast.errors import ConfigError, NumericError
from poiforecast.synthetic import generate_world

from conftest import SMALL, TINY, make_histories


def test_zero_head_is_uniform():
    head = CategoryHead(8, 5)
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    dist = predict_category(torch.randn(8), head, "abcde")
    assert np.allclose(dist.probabilities, 0.2)


def test_softmax_example():
    assert softmax64([1.0, 2.0, 3.0]) == pytest.approx([0.0900, 0.2447, 0.6652], abs=5e-5)


def test_non_finite_logits_raise():
    head = CategoryHead(4, 3)
    with pytest.raises(NumericError, match="non-finite"):
        predict_category(torch.tensor([float("nan"), 0, 0, 0]), head, "abc")


def test_loss_values():
    one_hot = CategoryDistribution(np.array([0.0, 1.0, 0.0]), ("a", "b", "c"))
    assert category_loss(one_hot, 1) == 0.0
    assert category_loss(CategoryDistribution(np.full(4, 0.25), tuple("abcd")), 2) == pytest.approx(math.log(4))
    assert category_loss(CategoryDistribution(np.array([0.7, 0.2, 0.1]), tuple("abc")), 1) == \
        pytest.approx(-math.log(0.2))
    # zero probability is floored, not infinite
    assert category_loss(one_hot, 0) == pytest.approx(-math.log(1e-12))
    with pytest.raises(IndexError):
        category_loss(one_hot, 3)


def test_floored_cross_entropy_matches_and_floors():
    logits = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 200.0]], dtype=torch.float64)
    loss = floored_cross_entropy(logits, torch.tensor([0, 0]))
    assert loss[0].item() == pytest.approx(-math.log(softmax64([1, 2, 3])[0]))
    assert loss[1].item() == pytest.approx(-math.log(1e-12))


def test_logit_gradient_is_softmax_minus_onehot():
    logits = torch.tensor([[0.3, -1.2, 2.0, 0.5]], dtype=torch.float64, requires_grad=True)
    floored_cross_entropy(logits, torch.tensor([2])).sum().backward()
    expected = softmax64(logits.detach().numpy()[0]) - np.eye(4)[2]
    assert np.allclose(logits.grad.numpy()[0], expected, atol=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)


@pytest.fixture(scope="module")
def small_world():
    w = generate_world(n_users=16, visits_per_user=30, swap_fraction=0.25, seed=4)
    return w, temporal_split(w.histories, w.swap_time, seed=0)


def test_single_example_memorised(nyc_pois):
    hist = make_histories([("u", 10, "p-soho"), ("u", 20, "p-union"), ("u", 60, "p-soho"), ("u", 70, "p-midtown")])
    split = temporal_split(hist, 50, seed=0)
    cfg = TrainConfig(learning_rate=1e-2, patience=1000, max_epochs=200)
    state = train(split, nyc_pois, JOINT, TINY, cfg, seed=0)
    assert len(state.featurizer.training_items()) == 1
    assert state.history[-1]["train_loss"] < 0.01


def test_loss_decreases(small_world):
    world, split = small_world
    state = train(split, world.pois, JOINT, SMALL, TrainConfig(max_epochs=8, patience=100), seed=0)
    losses = [h["train_loss"] for h in state.history]
    assert losses[-1] < losses[0]


def test_epoch_zero_loss_deterministic(small_world):
    world, split = small_world
    runs = [train(split, world.pois, m, SMALL, TrainConfig(max_epochs=1), seed=5).history[0]["train_loss"]
            for m in (JOINT, JOINT)]
    assert runs[0] == runs[1]
    other = train(split, world.pois, JOINT, SMALL, TrainConfig(max_epochs=1), seed=6).history[0]["train_loss"]
    assert other != runs[0]


def test_markov_category_accuracy_near_bayes_rate(world, trained):
    bayes = world.bayes_rate()
    assert bayes == pytest.approx(0.85, abs=1e-9)
    acc = trained[JOINT].state.validation_accuracy()
    print(f"validation category Acc@1 {acc:.4f} vs Bayes rate {bayes:.4f}")
    assert abs(acc - bayes) <= 0.05


def test_baseline_head_trains_on_training_pois(trained, world_split):
    state = trained[BASELINE].state
    assert state.model.head.poi_ids == tuple(sorted(world_split.train_poi_ids))


def test_checkpoint_round_trip(tmp_path, small_world):
    world, split = small_world
    for method in (JOINT, BASELINE):
        state = train(split, world.pois, method, SMALL, TrainConfig(max_epochs=2), seed=0)
        save_checkpoint(state, tmp_path / f"{method}.pt")
        again = load_checkpoint(tmp_path / f"{method}.pt", split, world.pois)
        items = state.featurizer.target_items(split.test)
        assert torch.equal(state.logits(items), again.logits(items))
        assert again.best_metric == state.best_metric and again.method == method


def test_corrupt_checkpoint(tmp_path, small_world):
    world, split = small_world
    (tmp_path / "x.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.pt", split, world.pois)
