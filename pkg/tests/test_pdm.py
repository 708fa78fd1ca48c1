import cmath
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iotpipe.ingest import IngestHttpServer, RawStore
from iotpipe.messaging import Broker
from iotpipe.pdm import (
    FEATURE_NAMES,
    CleanParams,
    FeatureMismatch,
    FeatureVector,
    ModelError,
    SpectrumError,
    clean,
    cross_validate,
    excess_kurtosis,
    features_from_segments,
    featurize_signals,
    load_model,
    predict,
    save_model,
    select_features,
    skewness,
    spectrum_features,
    stratified_folds,
    train_dt,
    train_rf,
    train_svm,
)
from iotpipe.pdm import handlers
from iotpipe.pdm.spectrum import N_BANDS, hann
from iotpipe.simulator import SimConfig, XorShiftRng, cycle_batches, generate_cycle
from iotpipe.simulator.generator import FaultMode
from iotpipe.storage import Storage, StreamSegment, read_feature_csv, read_segment

T0 = 1_700_000_000_000_000


# -- oracles ------------------------------------------------------------------

def moment_oracle(xs):
    n = len(xs)
    mean = math.fsum(xs) / n
    m2 = math.fsum((x - mean) ** 2 for x in xs) / n
    m3 = math.fsum((x - mean) ** 3 for x in xs) / n
    m4 = math.fsum((x - mean) ** 4 for x in xs) / n
    if m2 < 1e-24:
        return 0.0, 0.0
    return m3 / m2**1.5, m4 / m2**2 - 3.0


def dft_band_oracle(window_values, rate):
    """Normalised band energies of one 2048-sample window by direct DFT."""
    n = len(window_values)
    mean = math.fsum(window_values) / n
    w = [0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)]
    xw = [(v - mean) * wi for v, wi in zip(window_values, w)]
    nyq = rate / 2
    bands = [0.0] * N_BANDS
    for k in range(1, n // 2 + 1):
        f = k * rate / n
        if f < 1.0:
            continue
        acc = 0j
        for i, v in enumerate(xw):
            acc += v * cmath.exp(-2j * math.pi * k * i / n)
        p = abs(acc) ** 2 * (1.0 if k == n // 2 else 2.0)
        b = min(N_BANDS - 1, int(math.floor(N_BANDS * math.log2(f) / math.log2(nyq) + 1e-12)))
        bands[b] += p
    total = math.fsum(bands)
    return [x / total for x in bands]


def fast_seg(values, rate=2048, channel="vibration"):
    return StreamSegment("wm-01", channel, "fast", T0, rate, np.asarray(values, dtype=float))


def slow_seg(values, ts=None):
    values = np.asarray(values, dtype=float)
    ts = np.asarray(ts if ts is not None else T0 + np.arange(len(values)) * 1_000_000, dtype=np.int64)
    return StreamSegment("wm-01", "power", "slow", int(ts[0]) if len(ts) else T0, 1, values, ts)


# -- moments ------------------------------------------------------------------

def test_moment_examples():
    assert skewness([1, 2, 3]) == 0.0
    assert skewness([0, 0, 0, 1]) == pytest.approx(moment_oracle([0, 0, 0, 1])[0], rel=1e-12)
    assert skewness([0, 0, 0, 1]) == pytest.approx(1.1547005383792515, rel=1e-12)
    assert excess_kurtosis([-1, 1, -1, 1]) == pytest.approx(-2.0, abs=1e-15)
    assert skewness([5, 5, 5]) == 0.0
    assert excess_kurtosis([5, 5, 5]) == 0.0


def test_moments_reject_empty():
    with pytest.raises(ValueError):
        skewness([])


def test_moments_match_oracle_on_random_arrays():
    rng = np.random.default_rng(11)
    for _ in range(200):
        x = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 10), rng.integers(1, 600))
        sk, ku = moment_oracle(x.tolist())
        assert abs(skewness(x) - sk) <= 1e-12 * max(abs(sk), 1.0)
        assert abs(excess_kurtosis(x) - ku) <= 1e-12 * max(abs(ku), 1.0)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.integers(2, 200), elements=finite),
       st.floats(-100, 100), st.floats(0.01, 100))
def test_moment_shift_scale_invariance(x, shift, scale):
    if np.var(x) < 1e-6:
        return
    for fn in (skewness, excess_kurtosis):
        assert abs(fn(x + shift) - fn(x)) <= 1e-9
        assert abs(fn(x * scale) - fn(x)) <= 1e-9


# -- spectrum -----------------------------------------------------------------

def test_band_energies_match_dft_oracle():
    rng = XorShiftRng(5)
    for trial in range(3):
        x = rng.normal(2048) + np.sin(2 * np.pi * (40 + 100 * trial) * np.arange(2048) / 2048)
        got = spectrum_features(x, 2048).band_energies
        want = dft_band_oracle(x.tolist(), 2048)
        for g, w in zip(got, want):
            assert abs(g - w) <= 1e-9 * abs(w)


def test_sine_64hz():
    t = np.arange(4096) / 2048
    f = spectrum_features(np.sin(2 * np.pi * 64 * t), 2048)
    assert f.dominant_freq_hz == 64.0
    edges = np.logspace(0, np.log10(1024), N_BANDS + 1)
    band = int(np.searchsorted(edges, 64.0, side="right") - 1)
    assert f.band_energies[band] > 0.99
    assert f.dominant_magnitude == pytest.approx(0.5, rel=1e-9)


def test_dc_signal_guard():
    f = spectrum_features(np.full(4096, 3.0), 2048)
    assert np.allclose(f.band_energies, 1 / 16)
    assert f.spectral_entropy == pytest.approx(4.0)
    assert f.dominant_freq_hz == 0.0


def test_white_noise_entropy_near_maximum():
    x = XorShiftRng(7).normal(2048 * 16)
    assert abs(spectrum_features(x, 2048).spectral_entropy - 4.0) <= 0.5


def test_spectrum_needs_one_window():
    with pytest.raises(SpectrumError):
        spectrum_features(np.zeros(2047), 2048)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.1, 50))
def test_amplitude_scaling(seed, gain):
    x = XorShiftRng(seed).normal(4096) + np.sin(2 * np.pi * 100 * np.arange(4096) / 2048)
    a = spectrum_features(x, 2048)
    b = spectrum_features(2 * x, 2048)
    assert np.allclose(a.band_energies, b.band_energies, rtol=1e-12, atol=1e-15)
    assert b.dominant_magnitude == pytest.approx(4 * a.dominant_magnitude, rel=1e-12)
    c = spectrum_features(gain * x, 2048)
    assert np.allclose(a.band_energies, c.band_energies, rtol=1e-10, atol=1e-15)


def test_hann_is_periodic():
    w = hann(8)
    assert w[0] == 0.0 and w[4] == 1.0 and w[-1] != 0.0


# -- cleaning -----------------------------------------------------------------

def test_clean_sorts_and_dedups():
    seg = slow_seg([30.0, 10.0, 20.0, 99.0], [T0 + 3_000_000, T0 + 1_000_000, T0 + 2_000_000,
                                              T0 + 2_000_000])
    out, rep = clean(seg)
    assert out.timestamps.tolist() == [T0 + 1_000_000, T0 + 2_000_000, T0 + 3_000_000]
    assert out.values.tolist() == [10.0, 20.0, 30.0]
    assert rep.duplicates_removed == 1 and rep.sorted


def test_clean_identity_on_clean_data():
    x = np.sin(np.arange(5000) / 30.0)
    seg = fast_seg(x)
    out, rep = clean(seg)
    assert out == seg
    assert (rep.duplicates_removed, rep.outliers_clipped, rep.gaps) == (0, 0, [])


def test_clean_replaces_spike_with_window_median():
    x = XorShiftRng(1).normal(4096, 0.1)
    x[1000] = 50.0
    out, rep = clean(fast_seg(x))
    assert rep.outliers_clipped == 1
    assert out.values[1000] == np.median(x[995:1006])


def test_clean_reports_gap_and_continues():
    ts = T0 + np.concatenate([np.arange(0, 60), np.arange(70, 120)]) * 1_000_000
    vals = 100.0 + np.sin(np.arange(len(ts)))
    out, rep = clean(slow_seg(vals, ts))
    assert rep.gaps == [(T0 + 59_000_000, T0 + 70_000_000)]
    assert rep.missing_samples(1) == 10
    assert len(out) == len(ts)


def test_clean_constant_notes_zero_mad():
    out, rep = clean(fast_seg(np.full(3000, 2.0)))
    assert rep.outliers_clipped == 0 and "MAD" in rep.note


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(20, 400), st.integers(0, 10))
def test_clean_idempotent(seed, n, n_spikes):
    rng = XorShiftRng(seed)
    x = rng.normal(n)
    idx = (rng.uniform(n_spikes) * n).astype(int)
    x[idx] += 40 * (rng.uniform(n_spikes) - 0.5)
    order = np.argsort(rng.uniform(n))
    ts = (T0 + np.arange(n) * 1_000_000)[order]
    ts[: n // 10] = ts[n // 10]  # some duplicate timestamps
    once, _ = clean(slow_seg(x, ts))
    twice, rep = clean(once)
    assert twice == once
    assert rep.duplicates_removed == 0 and rep.outliers_clipped == 0


def test_clean_idempotent_on_simulated_cycle():
    sig = generate_cycle(config=SimConfig(seed=2, duration_scale=0.05),
                         fault=FaultMode("bearing_fault", 0.8))
    for seg in sig.segments():
        once, _ = clean(seg)
        assert clean(once)[0] == once


# -- features -----------------------------------------------------------------

def test_catalog_shape():
    assert len(FEATURE_NAMES) == 79
    assert len(set(FEATURE_NAMES)) == 79


def test_features_of_simulated_cycle():
    sig = generate_cycle(config=SimConfig(seed=4, duration_scale=0.05))
    fv = featurize_signals("c1", sig)
    assert fv.values.shape == (79,) and np.all(np.isfinite(fv.values))
    assert fv["cycle_duration_s"] == pytest.approx(sig.duration_s)
    again = featurize_signals("c1", sig)
    assert again.values.tobytes() == fv.values.tobytes()


def test_features_of_zero_signals():
    n = 4096
    p = slow_seg(np.zeros(2))
    fv = features_from_segments("z", p, fast_seg(np.zeros(n), channel="current"),
                                fast_seg(np.zeros(n)), T0, T0 + 2_000_000)
    d = fv.as_dict()
    for sig in ("power_slow", "current_fast", "vibration_fast"):
        for stat in ("min", "max", "mean", "std", "rms", "skewness", "kurtosis", "crest_factor"):
            assert d[f"{sig}_{stat}"] == 0.0
    assert d["vibration_fast_spectral_entropy"] == pytest.approx(4.0)
    assert d["vibration_fast_band07"] == pytest.approx(1 / 16)
    assert d["cycle_current_sample_count"] == n
    assert d["cycle_slow_sample_count"] == 2


def test_bearing_fault_raises_vibration_rms():
    cfg = SimConfig(seed=9, duration_scale=0.05)
    normal = featurize_signals("n", generate_cycle(config=cfg))
    faulty = featurize_signals("f", generate_cycle(fault=FaultMode("bearing_fault", 0.5), config=cfg))
    assert faulty["vibration_fast_rms"] > normal["vibration_fast_rms"]


def test_short_fast_stream_fails():
    with pytest.raises(SpectrumError):
        features_from_segments("s", slow_seg([1.0, 2.0]), fast_seg(np.ones(100), channel="current"),
                               fast_seg(np.ones(100)), T0, T0 + 2_000_000)


def test_feature_vector_validation():
    with pytest.raises(ValueError):
        FeatureVector("x", FEATURE_NAMES, np.zeros(78))
    bad = np.zeros(79)
    bad[3] = np.nan
    with pytest.raises(ValueError):
        FeatureVector("x", FEATURE_NAMES, bad)


# -- models -------------------------------------------------------------------

def xor_data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 5))
    y = np.where((X[:, 0] > 0) ^ (X[:, 1] > 0), "b", "a")
    return X, y


def test_single_class_models_are_constant():
    X = np.random.default_rng(0).normal(size=(10, 4))
    y = ["normal"] * 10
    for train in (train_dt, train_rf, train_svm):
        m = train(X, y)
        assert m.predict_labels(np.random.default_rng(1).normal(size=(5, 4))) == ["normal"] * 5
    fv = FeatureVector("c", FEATURE_NAMES, np.zeros(79))
    p = predict(train_dt(np.zeros((3, 79)), ["normal"] * 3), fv)
    assert p.label == "normal" and p.scores == {"normal": 1.0}


def test_dt_unlimited_depth_fits_training_set():
    X, y = xor_data(80)
    m = train_dt(X, y)
    assert m.predict_labels(X) == list(y)


def test_rf_reduces_to_dt():
    X, y = xor_data(100, 3)
    Xt = np.random.default_rng(9).uniform(-1, 1, (500, 5))
    for seed in (0, 1, 7):
        dt = train_dt(X, y, {"seed": seed})
        rf = train_rf(X, y, {"n_trees": 1, "bootstrap": False, "features_per_split": 5,
                             "seed": seed})
        assert dt.predict_labels(Xt) == rf.predict_labels(Xt)


def test_dt_respects_max_depth_and_leaf_size():
    X, y = xor_data(100)
    stump = train_dt(X, y, {"max_depth": 1})
    assert len(stump.structure["trees"][0]["feature"]) == 3
    m = train_dt(X, y, {"min_samples_leaf": 10})
    counts = [sum(c) for c, f in zip(m.structure["trees"][0]["counts"],
                                     m.structure["trees"][0]["feature"]) if f == -1]
    assert min(counts) >= 10


def test_vote_ties_go_to_smallest_label():
    X = np.array([[0.0], [1.0]])
    m = train_rf(X, ["zeta", "alpha"], {"n_trees": 2, "bootstrap": True, "seed": 0})
    s = m.scores(np.array([[0.5]]))[0]
    if s[0] == s[1]:
        assert m.predict_labels(np.array([[0.5]])) == ["alpha"]


def test_svm_separates_linear_data():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(150, 3))
    y = np.array(["a", "b", "c"])[np.argmax(X @ np.array([[3, 0, 0], [0, 3, 0], [0, 0, 3]]), axis=1)]
    m = train_svm(X, y, {"epochs": 40})
    assert np.mean(np.array(m.predict_labels(X)) == y) > 0.9


@pytest.mark.parametrize("kind", ["dt", "rf", "svm"])
def test_model_roundtrip(kind, tmp_path):
    X, y = xor_data(120, 5)
    X = np.hstack([X, np.zeros((len(X), 74))])
    m = {"dt": train_dt, "rf": lambda X, y: train_rf(X, y, {"n_trees": 15}),
         "svm": train_svm}[kind](X, y)
    path = save_model(m, tmp_path / "m.json")
    loaded = load_model(path)
    R = np.random.default_rng(2).uniform(-1.5, 1.5, (1000, 79))
    assert loaded.predict_labels(R) == m.predict_labels(R)
    assert np.array_equal(loaded.scores(R), m.scores(R))
    for row in R[:20]:
        fv = FeatureVector("c", FEATURE_NAMES, row)
        assert predict(loaded, fv) == predict(m, fv)


def test_predict_label_is_argmax_of_scores():
    X, y = xor_data(120, 6)
    X = np.hstack([X, np.zeros((len(X), 74))])
    m = train_rf(X, y, {"n_trees": 9})
    for row in np.random.default_rng(0).uniform(-1, 1, (50, 79)):
        p = predict(m, FeatureVector("c", FEATURE_NAMES, row))
        best = max(p.scores.values())
        assert p.label == min(k for k, v in p.scores.items() if v == best)


def test_predict_rejects_feature_mismatch():
    m = train_dt(np.zeros((4, 3)) + np.arange(4)[:, None], ["a", "a", "b", "b"])
    with pytest.raises(FeatureMismatch):
        predict(m, FeatureVector("c", FEATURE_NAMES, np.zeros(79)))


def test_select_features_ranks_separating_feature_first():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(90, 79))
    y = np.repeat(["a", "b", "c"], 30)
    X[:, 41] = np.repeat([0.0, 10.0, 20.0], 30) + rng.uniform(0, 1, 90)
    ranked = select_features(X, y, 5)
    assert ranked[0] == 41
    assert sorted(select_features(X, y, 79)) == list(range(79))
    with pytest.raises(ModelError):
        select_features(X, ["a"] * 90, 3)


def test_stratified_folds_balanced_and_order_free():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 4))
    y = np.repeat(["x", "y", "z"], 20)
    folds = stratified_folds(X, y, 5, seed=3)
    for label in "xyz":
        assert np.bincount(folds[y == label], minlength=5).tolist() == [4] * 5
    perm = rng.permutation(60)
    assert np.array_equal(stratified_folds(X[perm], y[perm], 5, seed=3), folds[perm])


def test_cross_validation_shuffle_invariant():
    X, y = xor_data(90, 2)
    perm = np.random.default_rng(5).permutation(90)
    for kind, params in (("dt", None), ("rf", {"n_trees": 10}), ("svm", {"epochs": 10})):
        a = cross_validate(kind, params, X, y, 3, seed=4)
        b = cross_validate(kind, params, X[perm], y[perm], 3, seed=4)
        assert a.fold_accuracies == b.fold_accuracies
        assert a.mean_accuracy == pytest.approx(np.mean(a.fold_accuracies))


def test_more_trees_fit_at_least_as_well(sim_dataset):
    X, y, _ = sim_dataset
    def acc(n):
        return np.mean([np.mean(np.array(train_rf(X, y, {"n_trees": n, "seed": s})
                                         .predict_labels(X)) == y) for s in range(10)])
    assert acc(32) >= acc(2)


# -- stage handlers -----------------------------------------------------------

@pytest.fixture
def pdm_env(tmp_path):
    store = RawStore(tmp_path / "raw")
    broker = Broker()
    http = IngestHttpServer(store, lambda: broker, port=0).start()
    st = Storage(tmp_path / "store")
    ctx = handlers.PdmContext(st, http.base_url)
    yield store, ctx
    http.stop()


def ingest(store, sig):
    for second in cycle_batches(sig):
        for b in second:
            store.append(b)


def note(cycle_id, start, end, device="wm-01"):
    return json.dumps({"cycle_id": cycle_id, "device_id": device, "start_us": start,
                       "end_us": end}).encode()


def test_handlers_end_to_end(pdm_env):
    store, ctx = pdm_env
    sig = generate_cycle(config=SimConfig(seed=3, duration_scale=0.05))
    ingest(store, sig)
    X = np.vstack([featurize_signals(f"t{i}", generate_cycle(
        fault=FaultMode(*fm), config=SimConfig(seed=i, duration_scale=0.05))).values
        for i, fm in enumerate([("none", 0)] * 3 + [("bearing_fault", 0.7)] * 3)])
    handlers.install_model(ctx.storage, train_dt(X, ["normal"] * 3 + ["bearing_fault"] * 3))

    body = note("c1", sig.start_us, sig.end_us)
    m1 = handlers.download(ctx, body)
    st = ctx.storage
    assert st.load_manifest("c1").status == "downloaded"
    assert len(list((st.root / "data" / "c1").glob("*.raw.csv"))) == 3
    m2 = handlers.clean_stage(ctx, m1)
    m3 = handlers.feature_stage(ctx, m2)
    assert handlers.classify_stage(ctx, m3) is None
    rec = st.load_manifest("c1")
    assert rec.status == "classified"
    pred = json.loads(st.prediction_path("c1").read_text())
    fv = featurize_signals("c1", sig)
    disk = FeatureVector("c1", FEATURE_NAMES, read_feature_csv(st.features_path("c1"))[1])
    assert np.allclose(disk.values, fv.values, rtol=1e-6, atol=1e-9)
    assert pred == predict(load_model(st.model_path()), disk).to_dict()

    # redelivery: forwarded again, nothing recomputed, files unchanged
    before = {p: p.read_bytes() for p in (st.root / "data" / "c1").iterdir()}
    assert handlers.download(ctx, body) == m1
    assert handlers.clean_stage(ctx, m1) == m2
    assert {p: p.read_bytes() for p in (st.root / "data" / "c1").iterdir()} == before
    assert len(st.list_manifests()) == 1


def test_download_sixty_second_window(pdm_env):
    store, ctx = pdm_env
    sig = generate_cycle(config=SimConfig(seed=1, duration_scale=60 / 2820))
    ingest(store, sig)
    handlers.download(ctx, note("c60", sig.start_us, sig.start_us + 60_000_000))
    cur = read_segment(ctx.storage.data_path("c60", "current", "fast", "raw"))
    vib = read_segment(ctx.storage.data_path("c60", "vibration", "fast", "raw"))
    assert len(cur) == len(vib) == 122_880
    assert cur.explicit_timestamps is None


def test_download_empty_window_fails(pdm_env):
    _, ctx = pdm_env
    assert handlers.download(ctx, note("e1", T0, T0 + 1_000_000, device="ghost")) is None
    rec = ctx.storage.load_manifest("e1")
    assert rec.status == "failed" and rec.error == "empty-window"


def test_feature_stage_marks_short_cycle_failed(pdm_env):
    store, ctx = pdm_env
    sig = generate_cycle(config=SimConfig(seed=1, duration_scale=0.05))
    ingest(store, sig)
    short_end = sig.start_us + 500_000  # half a second: below one analysis window
    m = handlers.download(ctx, note("s1", sig.start_us, short_end))
    assert handlers.feature_stage(ctx, handlers.clean_stage(ctx, m)) is None
    rec = ctx.storage.load_manifest("s1")
    assert rec.status == "failed" and "features" in rec.error


def test_clean_params_from_config(tmp_path):
    ctx = handlers.PdmContext.from_config({"storage_root": str(tmp_path),
                                           "clean_params": {"outlier_sigmas": 4.0}})
    assert ctx.clean_params == CleanParams(outlier_sigmas=4.0)
