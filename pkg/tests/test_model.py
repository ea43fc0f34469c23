import dataclasses

import numpy as np
import pytest

from collabfuse import comms
from collabfuse.autodiff import Tape
from collabfuse.model import VARIANTS, CollabModel, variant_spec
from collabfuse.training import TrainConfig, evaluate, fit, make_variant
from collabfuse.world import ScenarioConfig, generate_frames, stack_frames


@pytest.fixture(scope="module")
def trained(small_scenario, small_arrays):
    model = CollabModel(small_scenario, "full", seed=0)
    fit(model, small_arrays, TrainConfig(epochs=3, batch_size=16), seed=0)
    return model


def test_variant_table():
    assert set(VARIANTS) == {"full", "no_select", "no_bayes", "neither", "single_agent", "blind_fusion",
                             "agent_level"}
    assert variant_spec("full").weighted and variant_spec("full").handshake
    assert not variant_spec("blind_fusion").handshake and not variant_spec("blind_fusion").weighted
    with pytest.raises(ValueError):
        variant_spec("who2com")


def test_infer_matches_direct_pass(trained, small_arrays):
    logits, _, res = trained.infer(small_arrays)
    with Tape():
        direct = trained.forward(small_arrays).logits.data
    # the wire carries binary32, so agreement is to single precision
    np.testing.assert_allclose(logits, direct, atol=1e-4)
    assert res.selection.hard.shape == small_arrays.avail.shape


def test_conservation_per_frame(trained, small_arrays):
    _, logs, res = trained.infer(small_arrays)
    D = trained.config.embed_dim
    offered = res.avail[:, 1:].sum(axis=(1, 2))
    accepted = res.selection.hard[:, 1:].sum(axis=(1, 2))
    for b, log in enumerate(logs):
        assert log.feature_bytes == comms.feature_packet_bytes(D) * log.accepted_pairs
        assert log.accepted_pairs == accepted[b]
        assert log.meta_bytes == comms.META_BYTES * offered[b]
        assert log.total_bytes == log.meta_bytes + log.feature_bytes


def test_rejected_payloads_are_never_read(trained, small_arrays):
    def garble(b, i, m, z, f, u):
        return (f, u) if z else (np.full_like(f, 1e30), np.full_like(u, -1e30))

    clean, _, res = trained.infer(small_arrays)
    assert (res.selection.hard[:, 1:] == 0).sum() > 0  # the check needs at least one rejection
    tampered, _, _ = trained.infer(small_arrays, tamper=garble)
    assert np.array_equal(clean, tampered)


def test_accepted_payloads_are_read(trained, small_arrays):
    def garble_accepted(b, i, m, z, f, u):
        return (f + 5.0, u) if z else (f, u)

    clean, _, _ = trained.infer(small_arrays)
    assert not np.array_equal(clean, trained.infer(small_arrays, tamper=garble_accepted)[0])


def test_single_agent_sends_nothing(trained, small_arrays):
    solo = make_variant("single_agent", trained)
    m = evaluate(solo, small_arrays)
    assert m.ps_kb == 0.0


def test_blind_fusion_accepts_everything_without_handshake(trained, small_arrays):
    blind = make_variant("blind_fusion", trained)
    _, logs, res = blind.infer(small_arrays)
    assert all(log.meta_bytes == 0 and log.accepted_pairs == log.offered_pairs for log in logs)
    np.testing.assert_array_equal(res.selection.hard, res.avail)


def test_agent_level_decides_per_agent(trained, small_arrays):
    agent = make_variant("agent_level", trained)
    hard = agent.infer(small_arrays)[2].selection.hard
    carries_both = small_arrays.avail[:, 1:].min(axis=-1) > 0
    assert np.all(hard[:, 1:, 0][carries_both] == hard[:, 1:, 1][carries_both])


def test_make_variant_copies_weights(trained):
    other = make_variant("no_bayes", trained)
    assert other.variant == "no_bayes" and trained.variant == "full"
    for a, b in zip(trained.parameters(), other.parameters()):
        assert np.array_equal(a.data, b.data) and a is not b


def test_neighbor_leaving_range_stops_packets(trained, small_arrays):
    arrs = dataclasses.replace(small_arrays, in_range=small_arrays.in_range.copy())
    arrs.in_range[:, 1] = 1.0
    arrs.in_range[10:, 1] = 0.0  # agent 1 leaves after frame 9
    _, logs, res = trained.infer(arrs)
    assert np.all(res.selection.hard[10:, 1] == 0)
    assert all(log.meta_bytes == comms.META_BYTES * res.avail[b, 1:].sum() for b, log in enumerate(logs))
    # earlier frames are unaffected by what happens later (up to BLAS batch rounding)
    early = trained.infer(arrs.take(np.arange(10)))[0]
    np.testing.assert_allclose(early, trained.infer(arrs)[0][:10], atol=1e-12)


def test_asymmetric_modalities_and_missing_ego_modality():
    cfg = ScenarioConfig(modality_sets=(("R",), ("R", "L"), ("L",), ()), frames_per_episode=20)
    arrs = stack_frames(generate_frames(cfg, 40, seed=1), cfg)
    for tag in ("full", "agent_level", "blind_fusion", "single_agent"):
        model = CollabModel(cfg, tag, seed=0)
        logits, logs, res = model.infer(arrs)
        assert np.all(np.isfinite(logits))
        assert np.all(res.selection.hard <= res.avail)
        assert np.all(res.avail[:, 3] == 0)
    # the ego has no L; with every L provider rejected the learned default is used
    solo = CollabModel(cfg, "single_agent", seed=0)
    solo.fusion.defaults["L"].data[...] = 3.0
    a = solo.infer(arrs)[0]
    solo.fusion.defaults["L"].data[...] = -3.0
    assert not np.array_equal(a, solo.infer(arrs)[0])


def test_request_overhead_flag(trained, small_arrays):
    _, logs, _ = trained.infer(small_arrays, request_overhead=True)
    assert all(log.request_bytes == comms.request_bytes(log.offered_pairs) for log in logs)
