from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings, strategies as st

from accentconv import dsp
from accentconv.speech_encoder import SpeechEncoderConfig, listener_length, pyramid_stack
from accentconv.text import PhonemeSequence, encode_transcript

fixture_ok = settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])


def _mel(t, seed=0):
    rng = np.random.default_rng(seed)
    return dsp.MelSpectrogram(rng.normal(-4.0, 2.0, size=(t, 80)))


@pytest.mark.parametrize("t,expected", [(16, 4), (17, 5), (1, 1)])
def test_listener_length_examples(tiny_encoder, t, expected):
    assert listener_length(t) == expected
    assert tiny_encoder.listener_forward(_mel(t)).shape[0] == expected


def test_listener_length_law_all_small_t(tiny_encoder):
    for t in range(1, 65):
        assert tiny_encoder.listener_forward(_mel(t, t)).shape[0] == math.ceil(math.ceil(t / 2) / 2)


def test_pyramid_odd_repeats_final_frame():
    x = torch.arange(1.0, 4.0).view(1, 3, 1)
    out, lens = pyramid_stack(x, torch.tensor([3]))
    assert out.tolist() == [[[1.0, 2.0], [3.0, 3.0]]]
    assert lens.tolist() == [2]


def test_teacher_forced_shapes(tiny_encoder):
    target = PhonemeSequence((3, 4, 5, 6, 7, 8, 9))
    emb, logits, align = tiny_encoder.teacher_forced_forward(_mel(40), target)
    assert emb.shape == (7, 16)
    assert logits.shape[1] == tiny_encoder.inventory.num_classes
    # one extra row scores EOS
    assert logits.shape[0] == 8
    assert np.allclose(align.sum(axis=1), 1.0, atol=1e-5)


@fixture_ok
@given(st.lists(st.integers(3, 12), min_size=1, max_size=10), st.integers(4, 60))
def test_embedding_length_contract(tiny_encoder, ids, t):
    emb, _, _ = tiny_encoder.teacher_forced_forward(_mel(t), PhonemeSequence(tuple(ids)))
    assert emb.shape == (len(ids), 16)


def test_causality(tiny_encoder):
    a = PhonemeSequence((3, 4, 5, 6, 7, 8, 9))
    b = PhonemeSequence((3, 4, 5, 6, 7, 12, 9))
    mel = _mel(30)
    _, la, _ = tiny_encoder.teacher_forced_forward(mel, a)
    _, lb, _ = tiny_encoder.teacher_forced_forward(mel, b)
    # logits row i conditions on target ids < i: row 5 sees ids 0..4 only
    assert np.array_equal(la[:6], lb[:6])
    assert not np.allclose(la[6], lb[6])


def test_teacher_forced_errors(tiny_encoder):
    with pytest.raises(ValueError):
        tiny_encoder.teacher_forced_forward(_mel(10), PhonemeSequence(()))
    with pytest.raises(ValueError):
        tiny_encoder.teacher_forced_forward(_mel(10), PhonemeSequence((3, 99)))


def test_beam_one_equals_greedy(tiny_encoder):
    for seed in range(5):
        mel = _mel(24 + seed, seed)
        assert tiny_encoder.beam_search_decode(mel, 1).ids == tiny_encoder.greedy_decode(mel)


def test_beam_deterministic_and_well_formed(tiny_encoder):
    mel = _mel(30, 3)
    first = tiny_encoder.beam_search(mel, 4)
    again = tiny_encoder.beam_search(mel, 4)
    assert [h.ids for h in first] == [h.ids for h in again]
    for h in first:
        assert h.log_prob <= 0
        assert h.bottleneck_trace.shape == (len(h.ids), 16)
    scores = [h.score for h in first]
    assert scores == sorted(scores, reverse=True)


def test_beam_max_len_truncates(tiny_encoder):
    hyps = tiny_encoder.beam_search(_mel(20), 3, max_len=2)
    assert all(len(h.ids) <= 2 for h in hyps)


def test_beam_errors(tiny_encoder):
    with pytest.raises(ValueError):
        tiny_encoder.beam_search(_mel(10), 0)
    with pytest.raises(ValueError):
        tiny_encoder.beam_search(dsp.MelSpectrogram(np.zeros((0, 80))), 2)


def test_full_preset():
    cfg = SpeechEncoderConfig.full()
    assert (cfg.listener_dim, cfg.speller_dim, cfg.d_emb) == (256, 512, 512)


# --------------------------------------------------------------------------
# trained toy model


def test_trained_beam_dominates_greedy(pipeline):
    enc = pipeline.enc
    for r in pipeline.held_source.records[:10]:
        mel = dsp.mel_spectrogram(dsp.read_wav(r.audio_path))
        wide = enc.beam_search(mel, 10)
        narrow = enc.beam_search(mel, 1)
        # float32 speller: batched and single-row steps round differently
        assert max(h.log_prob for h in wide) >= max(h.log_prob for h in narrow) - 1e-5


def test_trained_decoding_accuracy(pipeline):
    enc = pipeline.enc
    records = pipeline.held_source.records
    hits = 0
    for r in records:
        hyp = enc.beam_search_decode(dsp.mel_spectrogram(dsp.read_wav(r.audio_path)), 10)
        hits += hyp.ids == encode_transcript(r.transcript, enc.inventory).ids
    assert hits / len(records) >= 0.9
