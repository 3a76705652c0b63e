import numpy as np
import pytest

from hypseek.data import (Assay, DataError, FeatureStore, Ligand, MissingFeatureError,
                          generate_synthetic)
from hypseek.losses import TERM_NAMES, BucketConfig, LossWeights
from hypseek.model import EmbeddingRangeError, GradientBundle, init_params
from hypseek.trainer import (LOG_COLUMNS, NonFiniteGradientError, TrainConfig, adam_step,
                             initial_state, load_train_state, save_train_state, train,
                             training_thresholds)


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(targets=6, ligands_per_assay=8, dim=12, seed=3)


def _cfg(**kw):
    base = dict(epochs=3, batch_assays=2, embed_dim=6, learning_rate=1e-3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def _same_params(a, b):
    return all(x.tobytes() == b.named_arrays()[k].tobytes() for k, x in a.named_arrays().items())


# -- Adam ------------------------------------------------------------------------

def test_zero_gradient_keeps_params():
    params = init_params(4, 3, seed=0)
    state = initial_state(params, 0)
    zero = GradientBundle({k: np.zeros_like(a) for k, a in params.named_arrays().items()})
    new = adam_step(state, zero, TrainConfig())
    assert new.step == 1 and _same_params(new.params, params)


def test_first_adam_step_is_minus_lr_sign():
    params = init_params(2, 1, seed=0)
    cfg = TrainConfig(learning_rate=1e-3)
    grads = {k: np.full_like(a, 0.37) for k, a in params.named_arrays().items()}
    grads["pocket.0.bias"] = np.array([-2.5])
    new = adam_step(initial_state(params, 0), GradientBundle(grads), cfg)
    for k, a in params.named_arrays().items():
        g = grads[k]
        expected = -1e-3 * np.sign(g) * np.abs(g) / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(new.params.named_arrays()[k] - a, expected, rtol=1e-9,
                                   atol=1e-18)


def test_adam_rejects_non_finite():
    params = init_params(2, 1, seed=0)
    grads = {k: np.zeros_like(a) for k, a in params.named_arrays().items()}
    grads["ligand.0.weight"] = np.array([[np.nan, 0.0]])
    with pytest.raises(NonFiniteGradientError, match="ligand.0.weight"):
        adam_step(initial_state(params, 0), GradientBundle(grads), TrainConfig())


def test_config_validation():
    for bad in (dict(learning_rate=0), dict(adam_beta1=1.0), dict(epochs=0),
                dict(schedule="step"), dict(grad_clip=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- training loop -------------------------------------------------------------------

def test_determinism(small_data, tmp_path):
    assays, store = small_data
    r1 = train(assays, store, _cfg(), tmp_path / "a.tsv")
    r2 = train(assays, store, _cfg(), tmp_path / "b.tsv")
    assert _same_params(r1.params, r2.params)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    r3 = train(assays, store, _cfg(seed=6))
    assert not _same_params(r1.params, r3.params)


def test_resume_is_bit_exact(small_data, tmp_path):
    assays, store = small_data
    cfg = _cfg(epochs=4, schedule="cosine")
    full = train(assays, store, cfg)
    half = train(assays, store, cfg, stop_after_epoch=2)
    save_train_state(tmp_path / "state.npz", half.state)
    resumed = train(assays, store, cfg, state=load_train_state(tmp_path / "state.npz"))
    assert _same_params(full.params, resumed.params)
    assert [e["total"] for e in half.epoch_log + resumed.epoch_log] == \
        [e["total"] for e in full.epoch_log]


def test_resume_with_hidden_and_tau(small_data, tmp_path):
    assays, store = small_data
    cfg = _cfg(epochs=2, hidden_dim=4, learn_tau=True, tau=0.3)
    half = train(assays, store, cfg, stop_after_epoch=1)
    save_train_state(tmp_path / "s.npz", half.state)
    back = load_train_state(tmp_path / "s.npz")
    assert back.params.tau == half.state.params.tau and back.step == half.state.step
    assert _same_params(back.params, half.state.params)


def test_degenerate_batch_is_inert():
    store = FeatureStore(["p", "l"], np.array([[1.0, 0.0], [0.0, 1.0]]))
    assays = [Assay("a", "t", ("p",), (Ligand("l", "l", True, 1.0),))]
    zero = LossWeights(0, 0, 0, 0, 0, 0, 0, 0, 0)
    cfg = TrainConfig(epochs=3, embed_dim=2, weights=zero)
    result = train(assays, store, cfg)
    assert all(e["total"] == 0.0 for e in result.epoch_log)
    start = init_params(2, 2, cfg.seed)
    for k, a in start.named_arrays().items():
        assert np.max(np.abs(result.params.named_arrays()[k] - a)) < 1e-6


def test_loss_log_breakdown_sums(small_data, tmp_path):
    assays, store = small_data
    cfg = _cfg(epochs=2)
    train(assays, store, cfg, tmp_path / "log.tsv")
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert tuple(lines[0].split("\t")) == LOG_COLUMNS
    coef = cfg.weights.term_coefficients()
    rows = [ln.split("\t") for ln in lines[1:]]
    assert sum(r[1] == "mean" for r in rows) == 2
    for r in rows:
        terms = dict(zip(TERM_NAMES, map(float, r[3:])))
        assert abs(sum(coef[k] * v for k, v in terms.items()) - float(r[2])) <= 1e-9


def test_log_appends_without_second_header(small_data, tmp_path):
    assays, store = small_data
    train(assays, store, _cfg(epochs=1), tmp_path / "log.tsv")
    train(assays, store, _cfg(epochs=1), tmp_path / "log.tsv")
    text = (tmp_path / "log.tsv").read_text()
    assert text.count("epoch\tbatch") == 1


def test_pocket_sampling_uses_alternates(small_data):
    assays, store = small_data
    # corrupting the second candidate pocket only matters if it is ever sampled
    values = store.values.copy()
    values[store.index["T000_P1"]] = 50.0
    with pytest.raises(EmbeddingRangeError):
        train(assays, FeatureStore(store.ids, values), _cfg(epochs=6, learning_rate=1e-4))


def test_errors(small_data):
    assays, store = small_data
    with pytest.raises(DataError):
        train([], store, _cfg())
    broken = [Assay("x", "t", ("nope",), assays[0].ligands)]
    with pytest.raises(MissingFeatureError, match="nope"):
        train(broken, store, _cfg())


def test_quartile_thresholds_from_training_set(small_data):
    assays, _ = small_data
    t = training_thresholds(assays, TrainConfig())
    assert len(t) == 4 and all(b > a for a, b in zip(t, t[1:]))
    aff = [-l.affinity for a in assays for l in a.ligands]
    assert t[2] == pytest.approx(np.median(aff))
    assert training_thresholds(assays, _cfg(buckets=BucketConfig(thresholds=(0.0, 1.0)))) \
        == (0.0, 1.0)


def test_clipping_is_counted_and_logged(small_data, caplog):
    assays, store = small_data
    with caplog.at_level("INFO", logger="hypseek.trainer"):
        result = train(assays, store, _cfg(epochs=1, grad_clip=1e-3))
    assert result.clip_events == 3
    assert "clipped" in caplog.text
