"""Prior sources: off, oracle, network and file."""

from __future__ import annotations

import pytest

from imu_bias_prior.dataset import DatasetError, SequenceBundle, save_weights, write_prior_csv
from imu_bias_prior.imu_model import BiasBounds, ImuBias, ImuSample
from imu_bias_prior.ipnet import IpnetConfig, PriorEstimate, init_weights
from imu_bias_prior.priors import FilePrior, NetworkPrior, NoPrior, OraclePrior, build_prior_source

LABEL = ImuBias((0.05, -0.02, 0.03), (0.002, -0.001, 0.0015))


def make_bundle(count=112, truth=None, sequence_id="seq00"):
    imu = [ImuSample(2.0 + k / 200.0, (0.01, 0.0, 0.0), (0.0, 0.0, 9.81)) for k in range(count)]
    return SequenceBundle(sequence_id, imu, truth=truth or {})


def test_no_prior_is_empty():
    assert NoPrior().estimates(make_bundle()) == []


def test_oracle_lookup_order():
    fallback = ImuBias((0.1, 0.0, 0.0), (0.0, 0.0, 0.0))
    truth = {"mean_bias": {"ba": [0.3, 0.0, 0.0], "bw": [0.0, 0.0, 0.01]}}

    (estimate,) = OraclePrior({"seq00": LABEL}, target=fallback).estimates(make_bundle(truth=truth))
    assert estimate.bias is LABEL
    assert estimate.timestamp == 2.0
    assert not estimate.warmup

    assert OraclePrior({"other": LABEL}, target=fallback).resolve(make_bundle(truth=truth)) is fallback
    from_truth = OraclePrior().resolve(make_bundle(truth=truth))
    assert from_truth.ba.tolist() == [0.3, 0.0, 0.0]
    assert from_truth.bw.tolist() == [0.0, 0.0, 0.01]


def test_oracle_without_any_source():
    with pytest.raises(DatasetError):
        OraclePrior().resolve(make_bundle())
    with pytest.raises(DatasetError):
        OraclePrior().resolve(make_bundle(truth={"mean_bias": {"ba": [1.0, 2.0]}}))
    assert OraclePrior(target=LABEL).estimates(make_bundle(count=0)) == []


def test_oracle_rejects_implausible_target():
    wild = ImuBias((3.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(DatasetError):
        OraclePrior(target=wild).estimates(make_bundle())
    with pytest.raises(DatasetError):
        OraclePrior().resolve(make_bundle(truth={"mean_bias": {"ba": [0.0, 0.0, 0.0], "bw": [0.0, 0.7, 0.0]}}))
    assert OraclePrior(target=wild, bounds=BiasBounds(max_ba=4.0)).resolve(make_bundle()) is wild


def test_network_prior_stream():
    weights = init_weights(IpnetConfig.tiny(), seed=2)
    estimates = NetworkPrior(weights, initial_prior=LABEL).estimates(make_bundle())
    assert len(estimates) == 5
    assert estimates[0].warmup and estimates[0].bias is LABEL
    assert [e.timestamp for e in estimates[1:]] == pytest.approx([2.0 + k / 200.0 for k in (63, 79, 95, 111)])


def test_file_prior_single_file_and_directory(tmp_path):
    stream = [PriorEstimate(0.0, ImuBias.zero(), warmup=True), PriorEstimate(1.0, LABEL)]
    single = write_prior_csv(tmp_path / "one.csv", stream)
    loaded = FilePrior(single).estimates(make_bundle(sequence_id="anything"))
    assert [e.timestamp for e in loaded] == [0.0, 1.0]

    write_prior_csv(tmp_path / "per_seq" / "seq07.csv", stream[1:])
    (only,) = FilePrior(tmp_path / "per_seq").estimates(make_bundle(sequence_id="seq07"))
    assert only.bias.as_vector().tolist() == LABEL.as_vector().tolist()
    with pytest.raises(FileNotFoundError):
        FilePrior(tmp_path / "per_seq").estimates(make_bundle(sequence_id="seq08"))

    write_prior_csv(tmp_path / "wild.csv", [PriorEstimate(1.0, ImuBias((0.0, 2.5, 0.0), (0.0, 0.0, 0.0)))])
    with pytest.raises(DatasetError):
        FilePrior(tmp_path / "wild.csv").estimates(make_bundle())
    assert len(FilePrior(tmp_path / "wild.csv", BiasBounds(max_ba=3.0)).estimates(make_bundle())) == 1


def test_build_prior_source(tmp_path):
    assert isinstance(build_prior_source("off"), NoPrior)
    oracle = build_prior_source("oracle", labels={"seq00": LABEL})
    assert isinstance(oracle, OraclePrior) and oracle.labels == {"seq00": LABEL}
    assert build_prior_source("file:/tmp/prior.csv").path.name == "prior.csv"

    path = save_weights(init_weights(IpnetConfig.tiny()), tmp_path / "weights.bin")
    network = build_prior_source("network", weights_path=path)
    assert isinstance(network, NetworkPrior)
    assert network.weights.config.to_dict() == IpnetConfig.tiny().to_dict()


@pytest.mark.parametrize("spec", ["network", "file", "file:", "learned"])
def test_build_prior_source_rejects(spec):
    with pytest.raises(ValueError):
        build_prior_source(spec)
