import os
import sys
import time

import numpy as np
import pytest
import torch

from dymesh.data import normalize_window
from dymesh.mesh import DynamicMesh
from dymesh.synthetic import grid_sheet
from dymesh.vae import VaeConfig

# Set DYMESH_REGEN_GOLDEN=1 to rewrite files under tests/data instead of comparing.
REGEN_GOLDEN = os.environ.get("DYMESH_REGEN_GOLDEN") == "1"
DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def waving_grid(nx=4, ny=4, frames=4, amp=0.2, phase=0.0):
    """A small sheet whose z coordinate waves over time; nx*ny vertices."""
    verts, faces = grid_sheet(nx, ny)
    t = np.arange(frames)[:, None]
    z = amp * np.sin(2 * np.pi * (verts[None, :, 0] + t / frames) + phase)
    v = np.repeat(verts[None], frames, 0).astype(np.float64)
    v[..., 2] += z
    return normalize_window(DynamicMesh(faces, v.astype(np.float32)))


def tiny_config(frames=4, **kw):
    base = dict(
        frames=frames, hidden_dim=8, latent_channels=3, encoder_layers=2, decoder_blocks=1, tokens=4,
        pe0_bands=2, pet_bands=1, lr=1e-2,
    )
    base.update(kw)
    return VaeConfig(**base)


@pytest.fixture
def tiny_mesh():
    return waving_grid()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# Desk-scale fixtures shared by the slow and acceptance tests.
DESK_VAE_STEPS = 1500
DESK_FLOW_STEPS = 300


def desk_vae_config():
    return VaeConfig.desk(token_jitter_min=2)


@pytest.fixture(scope="session")
def desk_meshes():
    from dymesh.synthetic import desk_corpus

    return desk_corpus()


@pytest.fixture(scope="session")
def desk_vae(desk_meshes):
    """The overfit desk model: 1500 steps on the eight-sequence desk corpus."""
    from dymesh.vae import DyMeshVAE, make_optimizer, train_vae

    cfg = desk_vae_config()
    torch.manual_seed(0)
    model = DyMeshVAE(cfg)
    start = time.process_time()
    train_vae(model, desk_meshes, DESK_VAE_STEPS, seed=0, optimizer=make_optimizer(model, cfg.lr))
    model.train_seconds = time.process_time() - start
    return model.eval()


@pytest.fixture(scope="session")
def desk_artifacts(desk_meshes, desk_vae, tmp_path_factory):
    """Checkpoints for the trained desk VAE and a flow model fitted on its latents."""
    from dymesh.data import compute_stats, dmb_write
    from dymesh.flow import FlowConfig, TrajectoryFlowModel, flow_items, make_flow_optimizer, save_flow, train_flow
    from dymesh.text import StubTextEncoder
    from dymesh.vae import save_vae

    root = tmp_path_factory.mktemp("desk")
    fcfg = FlowConfig.desk()
    stats = compute_stats(desk_meshes, desk_vae, fcfg.tokens)
    torch.manual_seed(0)
    flow = TrajectoryFlowModel(fcfg, stats)
    enc = StubTextEncoder(fcfg.text_dim)
    items = flow_items(desk_vae, desk_meshes, [enc.embed(m.caption or "") for m in desk_meshes], fcfg.tokens)
    train_flow(flow, items, enc.embed(""), DESK_FLOW_STEPS, seed=0, optimizer=make_flow_optimizer(flow, fcfg.lr))
    save_vae(root / "vae.ckpt", desk_vae)
    save_flow(root / "flow.ckpt", flow.eval())
    for i, m in enumerate(desk_meshes):
        dmb_write(root / f"mesh_{i}.dmb", m)
    return root


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("tests.test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
