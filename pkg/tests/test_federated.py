"""
Federated harness: wire messages, server protocol, clients, transports,
centralized equivalence, the privacy scan and cross-site rendering.

Run with:
    PYTHONPATH=. pytest -q tests/test_federated.py
"""
import time

import numpy as np
import pytest

from conftest import rel_err, toy_bundle, toy_samples
from errors import ConfigError, FormatError, MissingArtifactError, ProtocolError
from federated import harness, messages
from federated.client import Client
from federated.messages import GradientReport, ModelBroadcast, Shutdown
from federated.server import Server, aggregate, server_round
from nn import Adam
from schemas import FederatedSection, TrainSection
from state import latent_name
from steps.gradients import supervised_grads

SITES = ("siteA", "siteB", "siteC")


def _clients(model, n_sites=3, phase="pretrain", cls=Client, train=None):
    clients = []
    for j, site_id in enumerate(SITES[:n_sites]):
        labeled = [True, True] if phase == "pretrain" else [True, True, False]
        samples = toy_samples(model, len(labeled), seed=10 + j, labeled=labeled)
        clients.append(cls(site_id, toy_bundle(model, seed=0), samples, train or TrainSection(), seed=j,
                           phase=phase))
    return clients


def _fed(**overrides):
    return FederatedSection(**{"lr": 1e-3, "listen": "127.0.0.1:0", "timeout": 30.0, **overrides})


def _grads(value=0.0):
    return {"g_s.w1": np.full((2, 3), value), "g_m.conv1.b": np.full(4, value)}


# ====== messages ======

def test_message_round_trip():
    b = messages.decode(messages.encode(ModelBroadcast(4, _grads(0.5))))
    assert isinstance(b, ModelBroadcast) and b.round == 4 and np.array_equal(b.params["g_s.w1"], _grads(0.5)["g_s.w1"])
    r = messages.decode(messages.encode(GradientReport(4, "siteB", 3, _grads(-1.0), "unlabeled", 12)))
    assert (r.round, r.site_id, r.sample_count, r.kind, r.epoch) == (4, "siteB", 3, "unlabeled", 12)
    assert sorted(r.grads) == ["g_m.conv1.b", "g_s.w1"]
    s = messages.decode(messages.encode(Shutdown(9)))
    assert isinstance(s, Shutdown) and s.round == 9


def test_frame_header_layout():
    frame = messages.encode(Shutdown(7))
    assert frame[:4] == b"FSFL" and frame[4] == messages.MSG_SHUTDOWN
    assert int.from_bytes(frame[5:13], "little") == 7
    assert int.from_bytes(frame[13:17], "little") == len(frame) - 17


def test_malformed_frames():
    frame = messages.encode(ModelBroadcast(1, _grads()))
    with pytest.raises(FormatError):
        messages.decode(b"XXXX" + frame[4:])
    with pytest.raises(FormatError):
        messages.decode(frame[:-3])
    with pytest.raises(FormatError):
        messages.decode(frame[:4] + bytes([9]) + frame[5:])


def test_private_arrays_never_encode():
    with pytest.raises(ProtocolError):
        messages.encode(GradientReport(0, "siteA", 1, {"enh.conv1.w": np.zeros(3)}))
    with pytest.raises(ProtocolError):
        messages.encode(ModelBroadcast(0, {"z.00000": np.zeros(32)}))


# ====== server ======

def test_zero_gradients_leave_parameters_unchanged():
    server = Server(_grads(1.0), list(SITES))
    before = server.params.state_dict()
    out = server_round(server, [GradientReport(0, s, 1, _grads(0.0)) for s in SITES])
    assert out.round == 1 and server.round == 1
    assert all(np.array_equal(before[k], out.params[k]) for k in before)


def test_single_site_matches_one_adam_step(rng):
    g = {"g_s.w1": rng.normal(size=(2, 3)), "g_m.conv1.b": rng.normal(size=4)}
    server = Server(_grads(1.0), ["solo"], lr=1e-2)
    server_round(server, [GradientReport(0, "solo", 1, g)])
    reference = Server(_grads(1.0), ["solo"], lr=1e-2)
    Adam().step(dict(reference.params.items()), 1e-2, g)
    for name, value in reference.params.state_dict().items():
        assert np.array_equal(server.params[name].data, value)


def test_weighted_aggregate_in_site_order():
    reports = [GradientReport(0, "b", 3, _grads(2.0)), GradientReport(0, "a", 1, _grads(-2.0))]
    mean = aggregate(reports)
    assert np.allclose(mean["g_s.w1"], 1.0)
    assert all(np.array_equal(mean[k], aggregate(reports[::-1])[k]) for k in mean)


def test_protocol_violations():
    server = Server(_grads(), ["a", "b"])
    with pytest.raises(ProtocolError):
        server.receive(GradientReport(1, "a", 1, _grads()))
    with pytest.raises(ProtocolError):
        server.receive(GradientReport(0, "zz", 1, _grads()))
    server.receive(GradientReport(0, "a", 1, _grads()))
    with pytest.raises(ProtocolError):
        server.receive(GradientReport(0, "a", 1, _grads()))
    with pytest.raises(ProtocolError):
        server.step()
    with pytest.raises(ConfigError):
        Server(_grads(), ["a", "a"])
    with pytest.raises(ProtocolError):
        server_round(Server(_grads(), ["a"]), [GradientReport(0, "a", 1, {"g_s.w1": np.zeros(6)})])


def test_server_lr_follows_semi_supervised_schedule():
    schedule = TrainSection(epochs_constant=30, epochs_decay=30)
    server = Server(_grads(1.0), ["a", "b"], lr=1e-3, schedule=schedule)
    server_round(server, [GradientReport(0, s, 1, _grads(0.1), "labeled", 45) for s in ("a", "b")])
    assert server.last_lr == pytest.approx(0.5 * schedule.lr_labeled[0])
    server_round(server, [GradientReport(1, "a", 1, _grads(0.1), "labeled", 10),
                          GradientReport(1, "b", 3, _grads(0.1), "unlabeled", 10)])
    assert server.last_lr == pytest.approx((schedule.lr_labeled[0] + 3 * schedule.lr_unlabeled[0]) / 4)
    server_round(server, [GradientReport(2, s, 1, _grads(0.1), "labeled", 60) for s in ("a", "b")])
    assert server.last_lr == 0.0
    server_round(server, [GradientReport(3, s, 1, _grads(0.1)) for s in ("a", "b")])
    assert server.last_lr == 1e-3


# ====== client ======

def test_client_reports_single_site_gradients(small_model):
    (client,) = _clients(small_model, 1)
    (twin,) = _clients(small_model, 1)
    report = client.run(ModelBroadcast(0, client.global_params()))
    assert report.round == 0 and report.site_id == "siteA" and report.sample_count == 1
    kind, i, _ = twin.pick(0)
    sample = twin.samples[i]
    expected = supervised_grads(twin.bundle, twin.state["latents"][latent_name(i)].data,
                                sample.labels, sample.volume).global_grads()
    assert kind == "labeled" and report.grads.keys() == expected.keys()
    assert all(np.array_equal(report.grads[k], expected[k]) for k in expected)
    assert not any(k.startswith("enh.") for k in report.grads)


def test_client_checks_round_and_keeps_enhancer_local(small_model):
    (client,) = _clients(small_model, 1)
    with pytest.raises(ProtocolError):
        client.run(ModelBroadcast(3, client.global_params()))
    before = client.enhancer_state()
    client.run(ModelBroadcast(0, client.global_params()))
    assert client.expected_round == 1
    assert any(not np.array_equal(before[k], v) for k, v in client.enhancer_state().items())


def test_client_schedule_covers_every_sample_per_epoch(small_model):
    (client,) = _clients(small_model, 1, phase="semi_supervised")
    picks = [client.pick(r) for r in range(client.rounds_per_epoch)]
    assert sorted(i for _, i, _ in picks) == [0, 1, 2]
    assert {kind for kind, _, _ in picks} == {"labeled", "unlabeled"}


# ====== full runs ======

def test_zero_rounds_returns_initial_parameters(small_model):
    clients = _clients(small_model, 2)
    initial = clients[0].global_params()
    result = harness.run_federation(clients, 0, _fed())
    assert result.rounds == 0
    assert all(np.array_equal(initial[k], result.params[k]) for k in initial)


def test_federated_equals_centralized(small_model):
    fed = harness.run_federation(_clients(small_model), 3, _fed(), threads=3)
    central = harness.run_centralized(_clients(small_model), 3, _fed())
    for name in central.params:
        assert rel_err(fed.params[name], central.params[name]) < 1e-12
    for site in SITES:
        assert all(np.array_equal(fed.enhancers[site][k], central.enhancers[site][k]) for k in central.enhancers[site])


def test_semi_supervised_federation_runs(small_model):
    result = harness.run_federation(_clients(small_model, 2, phase="semi_supervised"), 3, _fed())
    assert all(np.all(np.isfinite(v)) for v in result.params.values())


def test_semi_supervised_federation_equals_centralized_under_decay(small_model):
    train = TrainSection(epochs_constant=0, epochs_decay=2)
    fed = harness.run_federation(_clients(small_model, 2, phase="semi_supervised", train=train), 5, _fed())
    central = harness.run_centralized(_clients(small_model, 2, phase="semi_supervised", train=train), 5, _fed())
    for name in central.params:
        assert rel_err(fed.params[name], central.params[name]) < 1e-12


def test_inproc_and_tcp_agree(small_model):
    inproc = harness.run_federation(_clients(small_model, 2), 2, _fed(), transport="inproc")
    tcp = harness.run_federation(_clients(small_model, 2), 2, _fed(), transport="tcp")
    assert all(np.array_equal(inproc.params[k], tcp.params[k]) for k in inproc.params)
    assert len(inproc.wire.frames) == len(tcp.wire.frames)


def test_wire_carries_only_global_arrays(small_model):
    result = harness.run_federation(_clients(small_model, 2), 2, _fed())
    names = harness.scan_wire(result.wire)
    assert names and all(n.startswith(("g_s.", "g_m.", "grad.g_s.", "grad.g_m.")) for n in names)
    assert not any(b"enh." in frame or b"z.000" in frame for _, frame in result.wire.frames)


class _Silent(Client):
    def run(self, broadcast):
        time.sleep(3.0)
        return super().run(broadcast)


class _Dropping(Client):
    def run(self, broadcast):
        raise ProtocolError("site went away")


def test_missing_report_times_out(small_model):
    clients = _clients(small_model, 2, cls=_Silent)
    with pytest.raises(ProtocolError):
        harness.run_federation(clients, 1, _fed(timeout=0.5))


def test_tcp_client_disconnect_aborts(small_model):
    clients = _clients(small_model, 2, cls=_Dropping)
    with pytest.raises(ProtocolError):
        harness.run_federation(clients, 1, _fed(timeout=5.0), transport="tcp")


def test_bad_transport_and_listen(small_model):
    with pytest.raises(ConfigError):
        harness.run_federation(_clients(small_model, 1), 1, _fed(), transport="carrier-pigeon")
    with pytest.raises(ConfigError):
        harness.run_federation(_clients(small_model, 1), 1, _fed(listen="nowhere"), transport="tcp")


# ====== cross-site rendering ======

def test_cross_site_render(small_model, rng):
    bundle = toy_bundle(small_model)
    z = rng.normal(size=32)
    enh = bundle.enhancer.params.state_dict()
    a, b, labels = harness.cross_site_render(bundle, z, enh, enh)
    assert np.array_equal(a, b) and a.shape == (8, 8, 8)
    assert np.array_equal(labels, bundle.labels(bundle.shape_params(z)))
    other = {k: v + 0.01 * rng.normal(size=v.shape) for k, v in enh.items()}
    a2, b2, labels2 = harness.cross_site_render(bundle, z, enh, other)
    assert np.array_equal(labels2, labels) and np.array_equal(a2, a) and not np.array_equal(a2, b2)


def test_cross_site_render_patient(small_model, rng):
    bundle = toy_bundle(small_model)
    (sample,) = toy_samples(small_model, 1)
    enh = bundle.enhancer.params.state_dict()
    other = {k: v + 0.01 * rng.normal(size=v.shape) for k, v in enh.items()}
    a, b = harness.cross_site_render_patient(bundle, sample.volume, sample.labels, enh, other)
    assert a.shape == b.shape == sample.volume.shape and not np.array_equal(a, b)


def test_load_site_resolves_relative_data(tmp_path):
    path = tmp_path / "a.toml"
    path.write_text('site_id = "siteA"\ndata = "siteA-data"\nseed = 3\n', encoding="utf-8")
    site = harness.load_site(path)
    assert site.data == str(tmp_path / "siteA-data") and site.phase == "pretrain"
    with pytest.raises(MissingArtifactError):
        harness.load_site(tmp_path / "missing.toml")
    path.write_text('site_id = "siteA"\ndata = "x"\ncolour = "red"\n', encoding="utf-8")
    with pytest.raises(ConfigError):
        harness.load_site(path)
