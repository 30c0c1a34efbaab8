import numpy as np
import pytest

from relprop.image import ImageSample, normalize, write_ppm
from relprop.model import ModelGraph, generate_toy_resnet


@pytest.fixture
def toy_graph() -> ModelGraph:
    return generate_toy_resnet(seed=7, channels=4, blocks=2, num_classes=5, input_hw=8)


def make_sample(graph: ModelGraph, seed: int, hw: int = 8) -> ImageSample:
    """Seeded in-memory image sample matching the graph's preprocessing."""
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 256, size=(3, hw, hw)).astype(np.float32)
    return ImageSample(raw=raw, normalized=normalize(raw, graph.preprocess),
                       path=f"<seed {seed}>")


def write_random_ppms(directory, count: int, seed: int, hw: int = 8) -> str:
    """Write seeded PPMs plus a newline-delimited manifest; returns manifest path."""
    rng = np.random.default_rng(seed)
    names = []
    for i in range(count):
        raw = rng.integers(0, 256, size=(3, hw, hw)).astype(np.float32)
        name = f"img{i:03d}.ppm"
        write_ppm(directory / name, raw)
        names.append(name)
    manifest = directory / "images.txt"
    manifest.write_text("\n".join(names) + "\n")
    return str(manifest)


def zero_weight_copy(graph: ModelGraph) -> ModelGraph:
    """Same structure, every conv/fc weight and bias zeroed (BN params kept)."""
    tensors = {}
    for name, arr in graph.tensors.items():
        suffix = name.rsplit(".", 1)[-1]
        tensors[name] = np.zeros_like(arr) if suffix in ("w", "b") else arr.copy()
    return ModelGraph(preprocess=graph.preprocess, stem=graph.stem,
                      blocks=graph.blocks, head=graph.head,
                      num_classes=graph.num_classes, tensors=tensors)
