import numpy as np
import pytest

from oct2octa.nets import NetConfig
from oct2octa.phantom import PhantomConfig, generate_phantom_pair
from oct2octa.volume import PairEntry, PairManifest, write_volume


@pytest.fixture
def tiny_net() -> NetConfig:
    return NetConfig(blocks=2, resblocks_per_block=1, base_channels=4,
                     codebook_size=16, codebook_dim=8)


def make_phantom_manifest(root, n_pairs, dims=(16, 16, 16), seed0=0, split="train"):
    """Write n phantom pairs under root and return their manifest."""
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_pairs):
        cfg = PhantomConfig(dims=dims, seed=seed0 + i)
        vol_oct, vol_octa = generate_phantom_pair(cfg)
        oct_name = f"{split}_{i:03d}_oct.mvol"
        octa_name = f"{split}_{i:03d}_octa.mvol"
        write_volume(vol_oct, root / oct_name)
        write_volume(vol_octa, root / octa_name)
        entries.append(PairEntry(oct_name, octa_name, f"{split}{i:03d}"))
    return PairManifest(entries=entries, split=split, root=root)


def random_volume_values(rng: np.random.Generator, dims) -> np.ndarray:
    return rng.random(dims, dtype=np.float32)
