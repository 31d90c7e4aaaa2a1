import hashlib
import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confrank.exceptions import (
    DataError,
    NumericalError,
    SnapshotChecksumError,
    SnapshotDescriptorError,
    SnapshotTruncatedError,
)
from confrank.models import (
    AdagradState,
    ArchDescriptor,
    GradientBuffer,
    ModelSnapshot,
    adagrad_step,
    apply_update,
    backward,
    backward_batch,
    forward,
    forward_batch,
    init_snapshot,
    load_snapshot,
    predict_logits,
    save_snapshot,
)

from . import oracles


# -- descriptors and initialisation ------------------------------------------


def test_lr_param_count_and_zero_init():
    arch = ArchDescriptor("lr", field_count=5, hash_dim=100)
    snap = init_snapshot(arch, seed=1)
    assert arch.param_count == 5 * 100 + 1
    assert snap.params.dtype == np.float32
    assert not snap.params.any()


def test_lr_ignores_embedding_sizes():
    a = ArchDescriptor("lr", 2, 10, embedding_dim=4, hidden_units=3)
    b = ArchDescriptor("lr", 2, 10, embedding_dim=16, hidden_units=99)
    assert a.param_count == b.param_count == 21


def test_deepfm_closed_form_count():
    F, H, k, m = 4, 50, 8, 16
    arch = ArchDescriptor("deepfm", F, H, embedding_dim=k, hidden_units=m)
    # bias + linear + embeddings + W1 + b1 + w2 + b2, counted independently of the layout code
    expected = 1 + F * H + F * H * k + (F * k) * m + m + m + 1
    assert arch.param_count == expected == 2346
    lay = arch.layout()
    assert lay["mlp_b2"][1] == expected
    sizes = [stop - start for start, stop in lay.values()]
    assert sizes == [1, F * H, F * H * k, F * k * m, m, m, 1]


def test_fm_count():
    assert ArchDescriptor("fm", 3, 10, embedding_dim=4).param_count == 1 + 30 + 120


def test_init_is_seeded():
    arch = ArchDescriptor("deepfm", 3, 20, 4, 6)
    assert init_snapshot(arch, 7).bit_equal(init_snapshot(arch, 7))
    assert not init_snapshot(arch, 7).bit_equal(init_snapshot(arch, 8))


def test_bad_descriptor():
    with pytest.raises(ValueError):
        ArchDescriptor("dcn", 2, 10)
    with pytest.raises(ValueError):
        ArchDescriptor("fm", 0, 10)


# -- snapshot invariants ---------------------------------------------------------


def test_snapshot_is_immutable():
    arch = ArchDescriptor("fm", 2, 8, 3)
    snap = init_snapshot(arch, 0)
    with pytest.raises(ValueError):
        snap.params[0] = 1.0
    source = np.zeros(arch.param_count)
    held = ModelSnapshot(arch, 0, source, 0)
    source[0] = 5.0
    assert held.params[0] == 0.0


def test_snapshot_rejects_wrong_length_and_non_finite():
    arch = ArchDescriptor("lr", 2, 8)
    with pytest.raises(SnapshotDescriptorError):
        ModelSnapshot(arch, 0, np.zeros(3), 0)
    bad = np.zeros(arch.param_count)
    bad[4] = np.nan
    with pytest.raises(NumericalError, match="offset 4"):
        ModelSnapshot(arch, 0, bad, 0)


# -- forward ---------------------------------------------------------------


def test_zero_lr_gives_zero_logit():
    snap = init_snapshot(ArchDescriptor("lr", 3, 9), 0)
    assert forward(snap, [1, 4, 8]) == 0.0


def test_lr_logit_is_bias_plus_weights():
    arch = ArchDescriptor("lr", 2, 5)
    params = np.arange(arch.param_count, dtype=np.float64) / 10
    snap = ModelSnapshot(arch, 0, params, 0)
    # bias 0.0; field 0 index 3 -> offset 4; field 1 index 1 -> offset 1 + 5 + 1
    assert forward(snap, [3, 1]) == pytest.approx(0.4 + 0.7)


def test_index_out_of_range():
    snap = init_snapshot(ArchDescriptor("lr", 2, 5), 0)
    with pytest.raises(DataError):
        forward(snap, [0, 5])
    with pytest.raises(DataError):
        forward(snap, [0, 1, 2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 5))
def test_fm_identity_matches_pairwise_sum(seed, F, k):
    rng = np.random.default_rng(seed)
    arch = ArchDescriptor("fm", F, 6, embedding_dim=k)
    params = np.zeros(arch.param_count)
    s, e = arch.layout()["embeddings"]
    params[s:e] = rng.normal(size=e - s)
    idx = rng.integers(0, 6, size=(4, F))
    logits, cache = forward_batch(arch, params, idx)
    for i in range(4):
        assert logits[i] == pytest.approx(oracles.fm_pairwise(cache.emb[i]), abs=1e-5)


def test_fm_with_equal_embeddings():
    F, k = 5, 3
    arch = ArchDescriptor("fm", F, 4, embedding_dim=k)
    params = np.zeros(arch.param_count)
    s, e = arch.layout()["embeddings"]
    v = np.array([0.5, -1.0, 2.0])
    params[s:e] = np.tile(v, F * 4)
    logit = forward(ModelSnapshot(arch, 0, params, 0), [0, 1, 2, 3, 0])
    assert logit == pytest.approx(0.5 * (F * F - F) * v @ v, rel=1e-6)


def test_deepfm_with_zero_mlp_equals_fm():
    fm = ArchDescriptor("fm", 3, 10, embedding_dim=4)
    deep = ArchDescriptor("deepfm", 3, 10, embedding_dim=4, hidden_units=6)
    fm_params = init_snapshot(fm, 3).params.astype(np.float64)
    fm_params[: 1 + 30] = np.random.default_rng(0).normal(size=31)
    deep_params = np.zeros(deep.param_count)
    deep_params[: fm.param_count] = fm_params
    idx = np.random.default_rng(1).integers(0, 10, size=(20, 3))
    a, _ = forward_batch(fm, fm_params, idx)
    b, _ = forward_batch(deep, deep_params, idx)
    np.testing.assert_array_equal(a, b)


def test_predict_logits_chunking_is_exact():
    arch = ArchDescriptor("deepfm", 3, 10, 4, 6)
    snap = init_snapshot(arch, 2)
    idx = np.random.default_rng(0).integers(0, 10, size=(101, 3))
    np.testing.assert_array_equal(predict_logits(snap, idx), predict_logits(snap, idx, chunk_size=7))
    assert predict_logits(snap, np.zeros((0, 3), dtype=int)).shape == (0,)


# -- backward ----------------------------------------------------------------


def test_zero_upstream_contributes_nothing():
    arch = ArchDescriptor("deepfm", 3, 10, 4, 6)
    snap = init_snapshot(arch, 2)
    buf = backward(snap, [1, 2, 3], 0.0)
    assert not buf.values.any()


def test_gradient_touches_only_reachable_rows():
    arch = ArchDescriptor("fm", 2, 10, embedding_dim=3)
    snap = init_snapshot(arch, 0)
    buf = backward(snap, [4, 7], 1.0)
    touched = set(buf.touched_offsets().tolist())
    lay = arch.layout()
    emb0 = lay["embeddings"][0]
    expected = {0, 1 + 4, 1 + 10 + 7}
    expected |= {emb0 + 4 * 3 + j for j in range(3)}
    expected |= {emb0 + (10 + 7) * 3 + j for j in range(3)}
    assert touched == expected


def test_batch_gradient_is_sum_of_per_example_gradients():
    arch = ArchDescriptor("deepfm", 2, 4, 3, 5)
    params = np.random.default_rng(0).normal(size=arch.param_count)
    snap_params = params
    idx = np.array([[1, 2], [1, 2], [3, 0], [1, 3]])
    up = np.array([0.3, -0.2, 0.5, 1.1])
    _, cache = forward_batch(arch, snap_params, idx)
    total = backward_batch(arch, snap_params, up, cache).values
    parts = np.zeros_like(total)
    for i in range(4):
        _, c = forward_batch(arch, snap_params, idx[i : i + 1])
        parts += backward_batch(arch, snap_params, up[i : i + 1], c).values
    np.testing.assert_allclose(total, parts, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", ["lr", "fm", "deepfm"])
@pytest.mark.parametrize("loss", sorted(oracles.LOSSES))
def test_gradients_match_finite_differences(kind, loss):
    rng = np.random.default_rng(zlib.crc32(f"{kind}/{loss}".encode()))
    problem = oracles.gradient_problem(kind, seed=int(rng.integers(1 << 30)))
    probes = oracles.finite_difference_probes(*problem, loss, n_probes=40, rng=rng)
    bad = [p for p in probes if not oracles.gradient_matches(p[1], p[2])]
    assert not bad, bad[:5]


def test_square_scoring_gradient():
    from confrank.losses import BatchLogits, SQUARE, cr_loss, rcr_loss

    rng = np.random.default_rng(4)
    u, v = rng.normal(size=7), rng.normal(size=7)
    y = np.array([1, 0, 1, 0, 0, 1, 0])
    for fn in (cr_loss, rcr_loss):
        _, g = fn(BatchLogits(u, y, v), SQUARE)
        for i in range(7):
            e = np.zeros(7)
            e[i] = 1e-5
            num = (fn(BatchLogits(u + e, y, v), SQUARE)[0] - fn(BatchLogits(u - e, y, v), SQUARE)[0]) / 2e-5
            assert g[i] == pytest.approx(num, rel=1e-6, abs=1e-9)


# -- optimizer ---------------------------------------------------------------


def _buffer(size, offsets, values):
    buf = GradientBuffer(size)
    buf.add(np.asarray(offsets), np.asarray(values, dtype=float))
    return buf


def test_zero_gradient_keeps_params_and_bumps_version():
    arch = ArchDescriptor("fm", 2, 5, 3)
    snap = init_snapshot(arch, 0)
    state = AdagradState(arch.param_count)
    nxt = apply_update(snap, _buffer(arch.param_count, [0, 3], [0.0, 0.0]), state)
    assert nxt.version == snap.version + 1
    assert nxt.params.tobytes() == snap.params.tobytes()


def test_single_step_arithmetic():
    params = np.array([1.0])
    state = AdagradState(1, learning_rate=0.1, eps=1e-8)
    adagrad_step(params, _buffer(1, [0], [1.0]), state)
    assert state.accum[0] == 1.0
    assert params[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_repeated_gradient_steps_shrink():
    params = np.array([0.0])
    state = AdagradState(1, learning_rate=0.05)
    steps = []
    for _ in range(20):
        before = params[0]
        adagrad_step(params, _buffer(1, [0], [0.7]), state)
        steps.append(abs(params[0] - before))
    assert all(b <= a for a, b in zip(steps, steps[1:]))


def test_untouched_parameters_keep_their_accumulator():
    params = np.zeros(4)
    state = AdagradState(4)
    adagrad_step(params, _buffer(4, [1], [2.0]), state)
    assert state.accum.tolist() == [0.0, 4.0, 0.0, 0.0]


def test_non_finite_gradient_names_offset():
    params = np.zeros(4)
    with pytest.raises(NumericalError, match="offset 2"):
        adagrad_step(params, _buffer(4, [1, 2], [1.0, np.inf]), AdagradState(4))


def test_apply_update_leaves_input_untouched():
    arch = ArchDescriptor("lr", 2, 5)
    snap = init_snapshot(arch, 0)
    before = snap.params.tobytes()
    nxt = apply_update(snap, _buffer(arch.param_count, [2], [1.0]), AdagradState(arch.param_count))
    assert snap.params.tobytes() == before
    assert nxt.params[2] < 0


# -- snapshot files -------------------------------------------------------------


@pytest.fixture
def saved(tmp_path):
    arch = ArchDescriptor("deepfm", 3, 11, 4, 5)
    snap = init_snapshot(arch, 9).with_params(
        np.random.default_rng(0).normal(size=arch.param_count), version=41
    )
    path = tmp_path / "m.snap"
    save_snapshot(snap, path)
    return snap, path


def test_round_trip_is_bit_equal(saved):
    snap, path = saved
    assert load_snapshot(path).bit_equal(snap)


def test_saving_twice_gives_identical_bytes(saved, tmp_path):
    snap, path = saved
    other = tmp_path / "again.snap"
    save_snapshot(snap, other)
    assert other.read_bytes() == path.read_bytes()


def test_corrupted_payload_is_a_checksum_error(saved):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[-5] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(SnapshotChecksumError):
        load_snapshot(path)


def test_truncated_file(saved):
    _, path = saved
    data = path.read_bytes()
    for cut in (5, 30, len(data) - 3):
        path.write_bytes(data[:cut])
        with pytest.raises(SnapshotTruncatedError):
            load_snapshot(path)


def _write_raw(path, arch_dict, param_count, payload):
    manifest = {
        "format_version": 1,
        "arch": arch_dict,
        "version": 0,
        "rng_seed": 0,
        "param_count": param_count,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest).encode()
    path.write_bytes(b"CONFRANK-SNAPSHOT\n" + struct.pack("<Q", len(blob)) + blob + payload)


def test_lr_manifest_with_fm_payload(tmp_path):
    lr = ArchDescriptor("lr", 2, 6)
    fm = ArchDescriptor("fm", 2, 6, 3)
    payload = np.zeros(fm.param_count, dtype="<f4").tobytes()
    path = tmp_path / "x.snap"
    _write_raw(path, lr.to_dict(), fm.param_count, payload)
    with pytest.raises(SnapshotDescriptorError):
        load_snapshot(path)
    _write_raw(path, lr.to_dict(), lr.param_count, payload)
    with pytest.raises(SnapshotDescriptorError):
        load_snapshot(path)


def test_error_classes_are_distinct():
    kinds = {SnapshotChecksumError, SnapshotDescriptorError, SnapshotTruncatedError}
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)


def test_overflowing_update_is_refused():
    params = np.zeros(2, dtype=np.float32)
    state = AdagradState(2, learning_rate=1e300)
    with pytest.raises(NumericalError, match="offset 1"):
        adagrad_step(params, _buffer(2, [1], [1.0]), state)
    assert params.tolist() == [0.0, 0.0] and state.accum[1] == 0.0
