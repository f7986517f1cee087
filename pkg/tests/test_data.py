import json

import numpy as np
import pytest
from scipy import stats

from paramid.data import (
    DatasetFormatError,
    generate_dataset,
    read_dataset,
    validate_dataset,
    write_dataset,
)
from paramid.envs import make_spec


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(make_spec("dual-particle", horizon=10), count=40, seed=123)


class TestGenerate:
    def test_single_row_shape(self):
        ds = generate_dataset(make_spec("dual-particle", horizon=5), count=1, seed=0)
        assert ds.states.shape == (1, 6, 8)

    def test_deterministic(self):
        spec = make_spec("springs", horizon=8)
        a = generate_dataset(spec, count=25, seed=9)
        b = generate_dataset(spec, count=25, seed=9)
        assert a == b

    def test_split_roughly_ninety_ten(self):
        ds = generate_dataset(make_spec("local-particle", horizon=4), count=2000, seed=5)
        frac = ds.val_mask.mean()
        assert 0.07 < frac < 0.13

    def test_param_marginals_uniform(self):
        # full-scale draw: marginals of the dual-particle sampler stay uniform
        ds = generate_dataset(make_spec("dual-particle", horizon=2), count=10_000, seed=21)
        for j in range(3):
            ks = stats.kstest(ds.params[:, j], stats.uniform(0.1, 1.9).cdf).statistic
            assert ks < 0.02

    def test_count_validation(self):
        with pytest.raises(ValueError):
            generate_dataset(make_spec("springs"), count=0, seed=0)


class TestRoundTrip:
    def test_write_read_identity(self, small_ds, tmp_path):
        path = tmp_path / "d.traj"
        write_dataset(small_ds, path)
        assert read_dataset(path) == small_ds

    def test_float64_round_trip(self, tmp_path):
        ds = generate_dataset(make_spec("bounce", horizon=6), count=5, seed=7, dtype="float64")
        path = tmp_path / "d64.traj"
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back == ds
        validate_dataset(back)

    def test_truncated_payload(self, small_ds, tmp_path):
        path = tmp_path / "d.traj"
        write_dataset(small_ds, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(DatasetFormatError, match="length mismatch"):
            read_dataset(path)

    def test_unknown_env_rejected(self, small_ds, tmp_path):
        path = tmp_path / "d.traj"
        write_dataset(small_ds, path)
        header, _, payload = path.read_bytes().partition(b"\n")
        obj = json.loads(header)
        obj["spec"]["env"] = "nosuch"
        path.write_bytes(json.dumps(obj).encode() + b"\n" + payload)
        with pytest.raises(Exception):
            read_dataset(path)

    def test_unsupported_version(self, small_ds, tmp_path):
        path = tmp_path / "d.traj"
        write_dataset(small_ds, path)
        header, _, payload = path.read_bytes().partition(b"\n")
        obj = json.loads(header)
        obj["version"] = 99
        path.write_bytes(json.dumps(obj).encode() + b"\n" + payload)
        with pytest.raises(DatasetFormatError, match="version"):
            read_dataset(path)


class TestRevalidation:
    def test_stored_rows_re_simulate_bit_exactly(self, small_ds, tmp_path):
        path = tmp_path / "d.traj"
        write_dataset(small_ds, path)
        validate_dataset(read_dataset(path))

    def test_bounce_float32_revalidates(self, tmp_path):
        ds = generate_dataset(make_spec("bounce", horizon=20), count=10, seed=3)
        path = tmp_path / "b.traj"
        write_dataset(ds, path)
        validate_dataset(read_dataset(path))

    def test_corrupted_row_detected(self, small_ds):
        bad = generate_dataset(make_spec("dual-particle", horizon=10), count=4, seed=1)
        bad.states[2, 5, 0] += 1e-3
        with pytest.raises(DatasetFormatError, match="row 2"):
            validate_dataset(bad)
