import numpy as np
import pytest
import torch

from slicebridge import bridge, control, data, retrieval
from slicebridge.nets import ControlBranch, Denoiser, DenoiserSpec, Encoder, EncoderSpec
from slicebridge.schedule import build_schedule

SPEC16 = DenoiserSpec(image_size=16, base_channels=4, depth=1, time_embed_dim=16)
ENC16 = EncoderSpec(image_size=16, embed_dim=16, base_channels=4, stages=2,
                    feature_tap=0)


@pytest.fixture(scope="module")
def setup():
    params = data.PhantomParams(n_subjects=4, slices_per_subject=8,
                                image_size=16, families=2)
    corpus = data.generate_corpus(params, seed=0)
    torch.manual_seed(0)
    encoder = Encoder(ENC16).eval()
    kb = retrieval.build_kb(encoder, [src for src, _ in corpus])
    kb.tau = -1.0  # every query hits; pair mining is exercised fully
    torch.manual_seed(0)
    model = Denoiser(SPEC16).eval()
    sched = build_schedule(50, 1.0)
    return corpus, encoder, kb, model, sched


def test_make_control_pairs_are_cross_subject(setup):
    corpus, encoder, kb, _, _ = setup
    pairs, skipped = control.make_control_pairs(corpus, encoder, kb, seed=0,
                                                max_pos_delta=2)
    assert pairs and skipped == 0
    target_by_loc = {f"{tgt.subject_id}:{s.position}": s.pixels
                     for _, tgt in corpus for s in tgt.slices}
    for p in pairs:
        assert p.subject_r != p.subject_y
        # The target is the retrieved subject's target slice, not the anchor's.
        key = [k for k, v in target_by_loc.items() if v is p.target or
               np.array_equal(v, p.target)]
        assert any(k.startswith(p.subject_r) for k in key)


def test_make_control_pairs_skips_misses(setup):
    corpus, encoder, kb, _, _ = setup
    strict = retrieval.KnowledgeBase(kb.embeddings, kb.records, kb.embed_dim,
                                     tau=2.0)
    pairs, skipped = control.make_control_pairs(corpus, encoder, strict, seed=0)
    assert pairs == [] and skipped == 4 * 8


def test_make_control_pairs_slerp_augmentation(setup):
    corpus, encoder, kb, _, _ = setup
    plain, _ = control.make_control_pairs(corpus, encoder, kb,
                                          slerp_augment_prob=0.0, seed=0)
    mixed, _ = control.make_control_pairs(corpus, encoder, kb,
                                          slerp_augment_prob=1.0, seed=0)
    changed = [not np.array_equal(a.y, b.y) for a, b in zip(plain, mixed)]
    assert all(np.array_equal(a.y, s.pixels)
               for a, (s, _) in zip(plain[:1], [(corpus[0][0].slices[0], 0)]))
    assert any(changed)
    for b in mixed:
        assert 0.0 <= b.y.min() and b.y.max() <= 1.0
    with pytest.raises(ValueError):
        control.make_control_pairs(corpus, encoder, kb, slerp_augment_prob=1.5)


def test_train_control_freezes_backbone_and_reduces_loss(setup):
    corpus, encoder, kb, model, sched = setup
    pairs, _ = control.make_control_pairs(corpus, encoder, kb, seed=0,
                                          max_pos_delta=2)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    torch.manual_seed(0)
    branch = ControlBranch.from_denoiser(model)
    trace = control.train_control(model, branch, pairs, sched,
                                  opts=control.ControlTrainOpts(iters=40,
                                                                lr=1e-3,
                                                                seed=0))
    after = model.state_dict()
    for k in before:
        assert torch.equal(before[k], after[k])
    assert len(trace) == 40
    assert np.mean(trace[-10:]) < np.mean(trace[:10])
    with pytest.raises(ValueError):
        control.train_control(model, branch, [], sched)


def test_train_control_is_reproducible(setup):
    corpus, encoder, kb, model, sched = setup
    pairs, _ = control.make_control_pairs(corpus, encoder, kb, seed=0,
                                          max_pos_delta=2)
    opts = control.ControlTrainOpts(iters=10, seed=0)
    torch.manual_seed(0)
    b1 = ControlBranch.from_denoiser(model)
    t1 = control.train_control(model, b1, pairs, sched, opts=opts)
    torch.manual_seed(0)
    b2 = ControlBranch.from_denoiser(model)
    t2 = control.train_control(model, b2, pairs, sched, opts=opts)
    assert t1 == t2
    for a, b in zip(b1.state_dict().values(), b2.state_dict().values()):
        assert torch.equal(a, b)


def test_controlled_sample_matches_bridge_sample_wiring(setup):
    _, _, _, model, sched = setup
    torch.manual_seed(0)
    branch = ControlBranch.from_denoiser(model).eval()
    y = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(1))
    r = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(2))
    a = control.controlled_sample(model, branch, sched, y, r, 10,
                                  torch.Generator().manual_seed(0))
    b = bridge.sample(model, sched, y, 10, torch.Generator().manual_seed(0),
                      branch=branch, control=r)
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()
