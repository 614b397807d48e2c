import numpy as np
import pytest
import torch

from disam.datamodel import Manifest, ManifestRecord, Pose, quantize, write_image, write_manifest
from disam.network import NetworkConfig, init_bundle

TINY = dict(image_size=16, base_channels=4, latent_channels=8, n_res_blocks_total=2,
            n_domains=2, disc_layers=2)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return NetworkConfig(**TINY)


@pytest.fixture
def tiny_bundle(tiny_config):
    return init_bundle(tiny_config)


def make_image_manifest(root, n_db=6, n_query=4, size=16, seed=0):
    """Random images on disk: domain 0 database, domain 1 queries."""
    rng = np.random.default_rng(seed)
    (root / "img").mkdir(parents=True, exist_ok=True)
    records = []
    for k in range(n_db + n_query):
        split = "database" if k < n_db else "query"
        rid = f"{split[0]}{k}"
        write_image(root / "img" / f"{rid}.png", quantize(rng.uniform(-1, 1, (3, size, size))))
        pose = Pose.from_yaw((10.0 * (k % n_db), 0.0, 0.0), 0.1 * k)
        records.append(ManifestRecord(rid, f"img/{rid}.png", 0 if split == "database" else 1,
                                      k % n_db, pose, split))
    m = Manifest(tuple(records), ("reference", "other"), (size, size), root)
    write_manifest(m, root / "manifest.tsv")
    return m


@pytest.fixture
def image_manifest(tmp_path):
    return make_image_manifest(tmp_path)
