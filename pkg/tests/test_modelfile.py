import base64
import json

import numpy as np
import pytest

from lcgap.descriptors import DescriptorConfig, auto_max_occupancy
from lcgap.modelfile import ModelFormatError, load_model, save_model
from lcgap.regression import KernelParams, NoiseModel, predict, train

T = "atomization_energy"


@pytest.fixture
def model(toy_dataset):
    c = DescriptorConfig("decaying", 4.0, 3.0, 1)
    c = c.with_occupancy(auto_max_occupancy(toy_dataset, c))
    return train(toy_dataset, T, c, KernelParams(40.0, 6.0), NoiseModel(0.2))


def test_round_trip_bit_exact(tmp_path, model, toy_dataset):
    p = tmp_path / "m.json"
    save_model(model, p)
    back = load_model(p)
    assert back.descriptor_config == model.descriptor_config
    assert back.kernel == model.kernel and back.noise == model.noise
    assert back.group_ids == model.group_ids
    np.testing.assert_array_equal(back.descriptors, model.descriptors)
    np.testing.assert_array_equal(back.weights, model.weights)
    assert back.applied_jitter == model.applied_jitter
    for m in toy_dataset:
        a, b = predict(model, m), predict(back, m)
        assert a.total == b.total
        np.testing.assert_array_equal(a.atomic_contributions, b.atomic_contributions)


def test_save_is_deterministic(tmp_path, model):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert save_model(model, a) == save_model(model, b)
    assert a.read_bytes() == b.read_bytes()


def _edit(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_unknown_schema_version(tmp_path, model):
    p = tmp_path / "m.json"
    save_model(model, p)
    _edit(p, lambda d: d.update(schema_version=2))
    with pytest.raises(ModelFormatError, match="schema_version 2"):
        load_model(p)


def test_descriptor_length_mismatch(tmp_path, model):
    p = tmp_path / "m.json"
    save_model(model, p)
    _edit(p, lambda d: d.update(descriptor_length=d["descriptor_length"] + 1))
    with pytest.raises(ModelFormatError, match="descriptor_length"):
        load_model(p)


def test_checksum_failure(tmp_path, model):
    p = tmp_path / "m.json"
    save_model(model, p)

    def corrupt(doc):
        raw = bytearray(base64.b64decode(doc["blocks"]["weights"]["data"]))
        raw[0] ^= 1
        doc["blocks"]["weights"]["data"] = base64.b64encode(bytes(raw)).decode()

    _edit(p, corrupt)
    with pytest.raises(ModelFormatError, match="checksum"):
        load_model(p)


def test_truncated_file(tmp_path, model):
    p = tmp_path / "m.json"
    save_model(model, p)
    p.write_text(p.read_text()[: len(p.read_text()) // 2])
    with pytest.raises(ModelFormatError, match="not a complete"):
        load_model(p)
