import json
from fractions import Fraction

import numpy as np
import pytest

from dymesh.evaluation import (
    ABLATION_TABLE,
    AblationFlags,
    ablation_manifest,
    ablation_run,
    fps_ratio_sweep,
    l2_sum_error,
    reconstruction_error,
    sweep_csv,
)
from dymesh.mesh import DynamicMesh
from dymesh.vae import DyMeshVAE, VaeConfig

from .conftest import tiny_config, waving_grid
from .oracles import frame_avg_l2_reference


def mesh_with(vertices):
    return DynamicMesh([[0, 1, 2]], vertices)


def test_error_zero_for_identical():
    m = mesh_with(np.random.default_rng(0).normal(size=(3, 4, 3)))
    assert reconstruction_error(m, m) == 0.0 and l2_sum_error(m, m) == 0.0


def test_error_uniform_offset():
    v = np.random.default_rng(0).normal(size=(5, 6, 3)).astype(np.float32)
    shifted = (v.astype(np.float64) + [0.3, 0, 0.4]).astype(np.float32)
    assert reconstruction_error(mesh_with(shifted), mesh_with(v)) == pytest.approx(0.5, abs=1e-6)
    assert l2_sum_error(mesh_with(shifted), mesh_with(v)) == pytest.approx(3.0, abs=1e-5)


def test_error_matches_scalar_oracle_and_is_a_metric():
    rng = np.random.default_rng(1)
    a, b, c = (mesh_with(rng.normal(size=(4, 7, 3)).astype(np.float32)) for _ in range(3))
    assert reconstruction_error(a, b) == pytest.approx(frame_avg_l2_reference(a.vertices, b.vertices), abs=1e-12)
    assert reconstruction_error(a, b) == reconstruction_error(b, a) > 0
    assert reconstruction_error(a, c) <= reconstruction_error(a, b) + reconstruction_error(b, c) + 1e-12


def test_error_shape_mismatch():
    with pytest.raises(ValueError):
        reconstruction_error(mesh_with(np.zeros((2, 3, 3))), mesh_with(np.zeros((3, 3, 3))))


def test_sweep_rows_and_skips():
    meshes = [waving_grid(4, 4), waving_grid(8, 8)]
    rows, skipped = fps_ratio_sweep(DyMeshVAE(tiny_config(tokens=64)), meshes)
    assert skipped == [(0, "1/32")]
    assert len(rows) == len(meshes) * 4 - len(skipped)
    assert [(r.mesh, r.tokens) for r in rows] == [(0, 1), (0, 2), (0, 4), (1, 2), (1, 4), (1, 8), (1, 16)]
    csv_text = sweep_csv(rows)
    assert csv_text.count("\n") == len(rows) + 1
    assert csv_text.splitlines()[0] == "mesh,num_vertices,ratio,tokens,frame_avg_l2,l2_sum"


def test_sweep_accepts_custom_ratios():
    rows, skipped = fps_ratio_sweep(DyMeshVAE(tiny_config(tokens=64)), [waving_grid()], [Fraction(1), 0.5])
    assert [r.tokens for r in rows] == [16, 8] and not skipped


def test_ablation_flags():
    assert len(ABLATION_TABLE) == 6 and ABLATION_TABLE[-1] == AblationFlags()
    assert [f.label() for f in ABLATION_TABLE] == [
        "no-use_adj", "no-use_pe0", "no-use_pet", "no-sep_attn", "no-emb_fps", "full"]
    cfg = AblationFlags(use_adj=False, emb_fps=False, sep_attn=False).apply(VaeConfig.desk())
    assert cfg.mask_mode == "none" and cfg.fps_mode == "raw-coords" and not cfg.sep_attn
    assert AblationFlags().apply(VaeConfig.desk()) == VaeConfig.desk()


@pytest.mark.parametrize("flags", ABLATION_TABLE, ids=lambda f: f.label())
def test_every_ablation_config_trains(flags):
    report = ablation_run(flags, [waving_grid(), waving_grid(phase=1.0)], tiny_config(), steps=3, seed=0)
    assert np.isfinite(report["frame_avg_l2"]) and np.isfinite(report["final_train_loss"])


def test_ablation_run_deterministic_and_manifest_verbatim():
    corpus = [waving_grid(), waving_grid(phase=1.0)]
    flags = AblationFlags(use_pet=False)
    r1 = ablation_run(flags, corpus, tiny_config(), steps=5, seed=4)
    r2 = ablation_run(flags, corpus, tiny_config(), steps=5, seed=4)
    assert r1 == r2
    manifest = json.loads(ablation_manifest(r1))
    assert manifest["flags"] == {"use_adj": True, "use_pe0": True, "use_pet": False, "sep_attn": True, "emb_fps": True}
    assert manifest["seed"] == 4 and len(manifest["checkpoint_sha256"]) == 64


@pytest.mark.slow
def test_full_token_ratio_is_lowest_in_row(desk_vae, desk_meshes):
    rows, _ = fps_ratio_sweep(desk_vae, desk_meshes, [Fraction(1, 32), Fraction(1, 16), Fraction(1, 8), Fraction(1, 4), Fraction(1)])
    for i in range(len(desk_meshes)):
        errs = {r.ratio: r.frame_avg_l2 for r in rows if r.mesh == i}
        assert errs["1"] == min(errs.values()), (i, errs)


def touching_corpus():
    from dymesh.data import normalize_window
    from dymesh.synthetic import touching_pair

    return [normalize_window(touching_pair(16, amp)) for amp in (0.3, 0.37, 0.44, 0.5)]


def test_touching_fixture_has_coincident_disconnected_vertices():
    from dymesh.mesh import build_adjacency

    mesh = touching_corpus()[0]
    v0 = mesh.vertices[0]
    _, inverse, counts = np.unique(v0, axis=0, return_inverse=True, return_counts=True)
    shared = np.flatnonzero(counts[inverse.ravel()] == 2)
    assert len(shared) == 48
    adj = build_adjacency(mesh.faces, mesh.num_vertices)
    half = mesh.num_vertices // 2
    assert not any(adj(i, j) for i in range(half) for j in range(half, mesh.num_vertices))


@pytest.mark.slow
def test_dropping_adjacency_degrades_touching_pair():
    corpus, base = touching_corpus(), VaeConfig.desk(token_jitter_min=2)
    no_adj = ablation_run(AblationFlags(use_adj=False), corpus, base, steps=800, seed=0)
    full = ablation_run(AblationFlags(), corpus, base, steps=800, seed=0)
    assert no_adj["frame_avg_l2"] > 2 * full["frame_avg_l2"], (no_adj["frame_avg_l2"], full["frame_avg_l2"])
