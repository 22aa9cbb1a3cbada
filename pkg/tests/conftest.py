"""
Shared fixtures: seeded generators, synthetic datasets and throwaway configs
"""
import numpy as np
import pytest
import yaml

from c2cl.config_loader import config_from_dict
from c2cl.schemas import PipelineConfig
from c2cl.services.minutiae import Minutia, MinutiaeSet
from c2cl.services.representation import Embedding
from c2cl.services.search import Template
from c2cl.services.synthetic import write_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def app_config(tmp_path):
    return config_from_dict({
        "logging": {"file": ""},
        "pipeline": {"jobs": 2, "output_dir": str(tmp_path / "out"),
                     "template_dir": str(tmp_path / "out" / "templates")},
        "database": {"path": str(tmp_path / "runs.db")},
    })


@pytest.fixture
def pipeline_config(app_config):
    return PipelineConfig.from_app_config(app_config)


@pytest.fixture
def config_file(tmp_path):
    """YAML config that logs to the console only and writes under tmp_path"""
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({
        "logging": {"level": "WARNING", "file": ""},
        "pipeline": {"jobs": 2, "output_dir": str(tmp_path / "out"),
                     "template_dir": str(tmp_path / "out" / "templates")},
        "database": {"path": str(tmp_path / "runs.db")},
    }), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """Three fingers, one contact and one contactless capture each"""
    root = tmp_path_factory.mktemp("synth")
    return write_synthetic_dataset(root, fingers=3, seed=7)


@pytest.fixture(scope="session")
def single_finger_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_one")
    return write_synthetic_dataset(root, fingers=1, seed=3)


def random_minutiae(rng, count=25, dims=(480, 480), margin=40.0):
    w, h = dims
    items = tuple(
        Minutia(rng.uniform(margin, w - margin), rng.uniform(margin, h - margin),
                rng.uniform(0.0, 2 * np.pi), "ending" if rng.random() < 0.5 else "bifurcation",
                float(rng.uniform(0.2, 1.0)))
        for _ in range(count)
    )
    return MinutiaeSet(items, dims)


def make_template(rng, template_id, subject, kind, dim=16, embedding=None, minutiae=None, impression=0):
    return Template(
        template_id=template_id,
        subject_id=subject,
        finger_position="R-index",
        impression_index=impression,
        capture_kind=kind,
        embedding=embedding if embedding is not None else Embedding.from_raw(rng.normal(size=dim)),
        minutiae=minutiae if minutiae is not None else random_minutiae(rng),
    )
