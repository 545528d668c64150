"""Copy channels: branch structure, closed-form loss, backend agreement."""

import numpy as np
import pytest

from cavityq.channels import (
    NoiseConfig,
    analytic_from_bath,
    check_stationarity,
    default_loss_bath,
    local_channel_apply,
    make_local_channel,
    make_transmission_channel,
    transmission_apply,
    validate_channel_pair,
)
from cavityq.dynamics import BathSpec, single_atom_op
from cavityq.hilbert import (
    SubsystemSpec,
    make_state,
    norm_squared,
    superpose,
)

TOL = 1e-12
CROSS_TOL = 1e-10

# default thermal preset for the stationarity scan: two modes, one detuned
SCAN_BATH = BathSpec(couplings=(0.25, 0.35), detunings=(0.0, 0.9))


def bath_pair_spec():
    return SubsystemSpec(
        [("i", "atom"), ("j", "atom"), ("c", "cavity"), ("b0", "bathmode")]
    )


def analytic_pair_spec():
    return SubsystemSpec(
        [("i", "atom"), ("j", "atom"), ("f0", "bathmode"), ("f1", "bathmode")]
    )


def bath_local(eta, p_therm=0.0, bath=None):
    noise = NoiseConfig(
        backend="bath", eta_local=eta, p_therm=p_therm, bath=bath
    )
    labels = ("b0",) if bath is None else tuple(f"b{k}" for k in range(bath.n_modes))
    return make_local_channel(noise, cavity="c", bath_labels=labels)


class TestNoiseConfig:
    def test_defaults(self):
        n = NoiseConfig()
        assert n.backend == "analytic"
        assert n.eta_local == 0.0

    def test_backend_validation(self):
        with pytest.raises(ValueError, match="backend"):
            NoiseConfig(backend="exact")

    def test_eta_range(self):
        with pytest.raises(ValueError, match="eta_local"):
            NoiseConfig(eta_local=1.0)
        with pytest.raises(ValueError, match="eta_trans"):
            NoiseConfig(eta_trans=-0.1)

    def test_thermal_needs_bath_backend(self):
        with pytest.raises(ValueError, match="thermal"):
            NoiseConfig(p_therm=0.1)

    def test_explicit_bath_needs_bath_backend(self):
        with pytest.raises(ValueError, match="explicit bath"):
            NoiseConfig(bath=BathSpec((0.1,), (0.0,)))

    def test_bath_backend_rejects_drive_offsets(self):
        with pytest.raises(ValueError, match="analytic-backend"):
            NoiseConfig(backend="bath", delta=0.1)
        with pytest.raises(ValueError, match="analytic-backend"):
            NoiseConfig(backend="bath", pulse_area_error=0.05)
        # the drive phase offset cancels exactly, both backends carry it
        NoiseConfig(backend="bath", phase_offset=0.4)


class TestLocalChannelBath:
    def test_two_branch_amplitudes_frozen(self):
        # eta = 0.2: survive sqrt(0.8), loss sqrt(0.2) with the mode excited
        ch = bath_local(0.2)
        s = make_state(bath_pair_spec(), {"i": 1, "j": 0, "c": 0, "b0": 0})
        t = local_channel_apply(s, ch, ("i", "j")).tensor()
        assert t[1, 1, 0, 0] == pytest.approx(0.8944271909999159, abs=TOL)
        assert t[1, 0, 0, 1] == pytest.approx(0.4472135954999579, abs=TOL)

    @pytest.mark.parametrize("eta", [0.01, 0.05, 0.2])
    def test_preset_etas_two_branches_only(self, eta):
        ch = bath_local(eta)
        s = make_state(bath_pair_spec(), {"i": 1, "j": 0, "c": 0, "b0": 0})
        out = local_channel_apply(s, ch, ("i", "j"))
        t = out.tensor()
        assert abs(t[1, 1, 0, 0]) ** 2 == pytest.approx(1 - eta, abs=TOL)
        assert abs(t[1, 0, 0, 1]) ** 2 == pytest.approx(eta, abs=TOL)
        # no stray atomic configuration anywhere
        stray = np.abs(t).sum() - abs(t[1, 1, 0, 0]) - abs(t[1, 0, 0, 1])
        assert stray < TOL
        assert norm_squared(out) == pytest.approx(1.0, abs=TOL)

    def test_empty_source_is_untouched(self):
        ch = bath_local(0.2)
        s = make_state(bath_pair_spec(), {"i": 0, "j": 0, "c": 0, "b0": 0})
        t = local_channel_apply(s, ch, ("i", "j")).tensor()
        assert t[0, 0, 0, 0] == pytest.approx(1.0, abs=TOL)

    def test_parked_target_passthrough(self):
        # a target parked in |r> is disarmed for the whole window
        ch = bath_local(0.2)
        s = make_state(bath_pair_spec(), {"i": 0, "j": 2, "c": 0, "b0": 0})
        t = local_channel_apply(s, ch, ("i", "j")).tensor()
        assert t[0, 2, 0, 0] == pytest.approx(1.0, abs=TOL)

    def test_superposition_branches(self):
        ch = bath_local(0.2)
        spec = bath_pair_spec()
        s = superpose(
            [
                (0.6, make_state(spec, {"i": 0, "j": 0, "c": 0, "b0": 0})),
                (0.8, make_state(spec, {"i": 1, "j": 0, "c": 0, "b0": 0})),
            ]
        )
        t = local_channel_apply(s, ch, ("i", "j")).tensor()
        assert t[0, 0, 0, 0] == pytest.approx(0.6, abs=TOL)
        assert t[1, 1, 0, 0] == pytest.approx(0.8 * np.sqrt(0.8), abs=TOL)
        assert t[1, 0, 0, 1] == pytest.approx(0.8 * np.sqrt(0.2), abs=TOL)

    def test_tuning_matches_closed_form(self):
        for eta in (0.01, 0.05, 0.2):
            ch = bath_local(eta)
            assert ch.metadata["vacuum_survival"] == pytest.approx(
                np.sqrt(1 - eta), abs=TOL
            )

    def test_per_slot_modes_isolate_losses(self):
        # two back-to-back copies onto a shared target: the photon lost in
        # slot 0 must stay in slot 0's mode, otherwise it re-enters the
        # cavity during slot 1 and the armed target absorbs it
        noise = NoiseConfig(backend="bath", eta_local=0.2)
        ch = make_local_channel(
            noise, cavity="c", bath_labels=(("b0",), ("b1",))
        )
        spec = SubsystemSpec(
            [
                ("i", "atom"),
                ("j", "atom"),
                ("t", "atom"),
                ("c", "cavity"),
                ("b0", "bathmode"),
                ("b1", "bathmode"),
            ]
        )
        s = make_state(spec, {"i": 1, "j": 0, "t": 0, "c": 0, "b0": 0, "b1": 0})
        s = local_channel_apply(s, ch, ("i", "t"), slot=0)
        s = single_atom_op(s, "t", "exchange_1r")
        s = local_channel_apply(s, ch, ("j", "t"), slot=1)
        t = s.tensor()
        # parked copy rides through slot 1 exactly; the slot-0 loss photon
        # stays in b0 instead of turning into a false copy on the target
        assert abs(t[1, 0, 2, 0, 0, 0]) == pytest.approx(np.sqrt(0.8), abs=TOL)
        assert abs(t[1, 0, 0, 0, 1, 0]) == pytest.approx(np.sqrt(0.2), abs=TOL)
        assert abs(t).sum() == pytest.approx(
            np.sqrt(0.8) + np.sqrt(0.2), abs=TOL
        )
        with pytest.raises(ValueError, match="slot 1"):
            local_channel_apply(
                make_state(
                    bath_pair_spec(), {"i": 1, "j": 0, "c": 0, "b0": 0}
                ),
                bath_local(0.2),
                ("i", "j"),
                slot=1,
            )

    def test_domain_violations(self):
        ch = bath_local(0.1)
        spec = bath_pair_spec()
        with pytest.raises(ValueError, match=r"\|r>"):
            local_channel_apply(
                make_state(spec, {"i": 2, "j": 0, "c": 0, "b0": 0}), ch, ("i", "j")
            )
        with pytest.raises(ValueError, match="park"):
            local_channel_apply(
                make_state(spec, {"i": 0, "j": 1, "c": 0, "b0": 0}), ch, ("i", "j")
            )
        with pytest.raises(ValueError, match="differ"):
            local_channel_apply(
                make_state(spec, {"i": 0, "j": 0, "c": 0, "b0": 0}), ch, ("i", "i")
            )


class TestLocalChannelAnalytic:
    def test_systematic_scalars_frozen(self):
        # delta=0.3, area error 0.1, eta=0.05, unit pulse rate:
        # survive exp(-0.3 i pi), copy sqrt(0.95) cos^2(pi/20) exp(-0.3 i pi)
        ch = make_local_channel(
            NoiseConfig(delta=0.3, pulse_area_error=0.1, eta_local=0.05),
            flag_labels=("f0", "f1"),
        )
        assert ch.l0.scalar == pytest.approx(
            0.5877852522924731 - 0.8090169943749475j, abs=TOL
        )
        assert ch.l1.scalar == pytest.approx(
            0.5588822826216114 - 0.7692354694720468j, abs=TOL
        )
        assert ch.la.scalar == pytest.approx(0.3097214662850751, abs=TOL)
        assert ch.la.scalar.imag == 0.0 and ch.la.scalar.real >= 0.0
        assert abs(ch.l1.scalar) ** 2 + ch.la.scalar.real**2 == pytest.approx(
            1.0, abs=TOL
        )

    def test_flag_slots(self):
        ch = make_local_channel(
            NoiseConfig(eta_local=0.2), flag_labels=("f0", "f1")
        )
        spec = analytic_pair_spec()
        s = make_state(spec, {"i": 1, "j": 0, "f0": 0, "f1": 0})
        first = local_channel_apply(s, ch, ("i", "j"), slot=0)
        t = first.tensor()
        assert abs(t[1, 0, 1, 0]) ** 2 == pytest.approx(0.2, abs=TOL)
        stale = make_state(spec, {"i": 1, "j": 0, "f0": 1, "f1": 0})
        with pytest.raises(ValueError, match="already set"):
            local_channel_apply(stale, ch, ("i", "j"), slot=0)
        with pytest.raises(ValueError, match="slot"):
            local_channel_apply(s, ch, ("i", "j"), slot=2)

    def test_phase_offset_drops_out(self):
        a = make_local_channel(NoiseConfig(eta_local=0.1), flag_labels=("f0",))
        b = make_local_channel(
            NoiseConfig(eta_local=0.1, phase_offset=0.7), flag_labels=("f0",)
        )
        assert a.l1.scalar == pytest.approx(b.l1.scalar, abs=TOL)
        assert a.l0.scalar == pytest.approx(b.l0.scalar, abs=TOL)

    def test_needs_flags(self):
        with pytest.raises(ValueError, match="flag"):
            make_local_channel(NoiseConfig(eta_local=0.1))

    def test_parked_emission_unrepresentable(self):
        # the scalar surgery has no rule for an occupied source feeding a
        # parked target; the bath wrapper, a plain unitary, allows it
        ch = make_local_channel(
            NoiseConfig(eta_local=0.1), flag_labels=("f0", "f1")
        )
        s = make_state(
            analytic_pair_spec(), {"i": 1, "j": 2, "f0": 0, "f1": 0}
        )
        with pytest.raises(ValueError, match="occupied source"):
            local_channel_apply(s, ch, ("i", "j"))


class TestTransmission:
    def test_bath_link_amplitudes(self):
        noise = NoiseConfig(backend="bath", eta_trans=0.2)
        ch = make_transmission_channel(
            noise, cavity_source="c1", cavity_target="c2", link_labels=("lnk0",)
        )
        spec = SubsystemSpec(
            [
                ("i", "atom"),
                ("j", "atom"),
                ("c1", "cavity"),
                ("c2", "cavity"),
                ("lnk0", "bathmode"),
            ]
        )
        s = make_state(spec, {"i": 1, "j": 0, "c1": 0, "c2": 0, "lnk0": 0})
        out = transmission_apply(s, ch, ("i", "j"))
        t = out.tensor()
        # copy lands with both cavities empty; loss sits in the link register
        assert t[1, 1, 0, 0, 0] == pytest.approx(np.sqrt(0.8), abs=TOL)
        assert abs(t[1, 0, 0, 0, 1]) == pytest.approx(np.sqrt(0.2), abs=TOL)
        stray = np.abs(t).sum() - abs(t[1, 1, 0, 0, 0]) - abs(t[1, 0, 0, 0, 1])
        assert stray < TOL

    def test_analytic_scalars(self):
        ch = make_transmission_channel(
            NoiseConfig(eta_trans=0.2), flag_labels=("ft0",)
        )
        assert ch.t1.scalar == pytest.approx(np.sqrt(0.8), abs=TOL)
        assert ch.ta.scalar == pytest.approx(np.sqrt(0.2), abs=TOL)
        assert ch.t0.scalar == pytest.approx(1.0, abs=TOL)

    def test_loss_hierarchy(self):
        trans = make_transmission_channel(
            NoiseConfig(eta_trans=0.2), flag_labels=("ft",)
        )
        validate_channel_pair(
            make_local_channel(NoiseConfig(eta_local=0.05), flag_labels=("fl",)),
            trans,
        )
        with pytest.raises(ValueError, match="dominate"):
            validate_channel_pair(
                make_local_channel(
                    NoiseConfig(eta_local=0.3), flag_labels=("fl",)
                ),
                trans,
            )
        # lossless pair is fine: nothing to dominate
        validate_channel_pair(
            make_local_channel(NoiseConfig(), flag_labels=("fl",)),
            make_transmission_channel(NoiseConfig(), flag_labels=("ft",)),
        )


class TestCrossBackend:
    def test_twin_matches_bath_local(self):
        ch = bath_local(0.2)
        twin = analytic_from_bath(ch, ("f0",))
        spec_b = bath_pair_spec()
        spec_a = SubsystemSpec([("i", "atom"), ("j", "atom"), ("f0", "bathmode")])
        rng = np.random.default_rng(7)
        for _ in range(5):
            a = rng.normal(size=2) + 1j * rng.normal(size=2)
            a /= np.linalg.norm(a)
            sb = superpose(
                [
                    (a[0], make_state(spec_b, {"i": 0, "j": 0, "c": 0, "b0": 0})),
                    (a[1], make_state(spec_b, {"i": 1, "j": 0, "c": 0, "b0": 0})),
                ]
            )
            sa = superpose(
                [
                    (a[0], make_state(spec_a, {"i": 0, "j": 0, "f0": 0})),
                    (a[1], make_state(spec_a, {"i": 1, "j": 0, "f0": 0})),
                ]
            )
            tb = local_channel_apply(sb, ch, ("i", "j")).tensor()
            ta = local_channel_apply(sa, twin, ("i", "j")).tensor()
            # survive amplitudes agree including phase
            assert ta[0, 0, 0] == pytest.approx(tb[0, 0, 0, 0], abs=CROSS_TOL)
            assert ta[1, 1, 0] == pytest.approx(tb[1, 1, 0, 0], abs=CROSS_TOL)
            # loss branches agree in weight per atomic configuration
            assert abs(ta[1, 0, 1]) == pytest.approx(
                abs(tb[1, 0, 0, 1]), abs=CROSS_TOL
            )

    def test_twin_matches_bath_transmission(self):
        noise = NoiseConfig(backend="bath", eta_trans=0.35)
        ch = make_transmission_channel(
            noise, cavity_source="c1", cavity_target="c2", link_labels=("lnk0",)
        )
        twin = analytic_from_bath(ch, ("f0",))
        assert twin.t1.scalar == pytest.approx(np.sqrt(0.65), abs=CROSS_TOL)
        assert twin.ta.scalar == pytest.approx(np.sqrt(0.35), abs=CROSS_TOL)

    def test_twin_closes_trace_for_custom_bath(self):
        ch = bath_local(0.0, bath=SCAN_BATH)
        twin = analytic_from_bath(ch, ("f0",))
        # detuned second mode drags the copy amplitude off the real axis
        assert abs(twin.l1.scalar.imag) > 1e-3
        assert abs(twin.l1.scalar) ** 2 + twin.la.scalar.real**2 == pytest.approx(
            1.0, abs=TOL
        )


class TestStationarity:
    def test_vacuum_presets_vanish(self):
        for eta in (0.01, 0.05, 0.2):
            assert check_stationarity(bath_local(eta)) < 1e-14
        trans = make_transmission_channel(
            NoiseConfig(backend="bath", eta_trans=0.2),
            cavity_source="c1",
            cavity_target="c2",
            link_labels=("lnk0",),
        )
        assert check_stationarity(trans) < 1e-14

    def test_scalar_presets_vanish(self):
        ch = make_local_channel(
            NoiseConfig(delta=0.3, pulse_area_error=0.1, eta_local=0.05),
            flag_labels=("f0",),
        )
        assert check_stationarity(ch) == 0.0

    def test_single_resonant_mode_commutes_even_thermally(self):
        # one mode cannot move an excitation anywhere: both environment
        # operators are diagonal in its occupation basis, so thermal
        # occupation alone does not break slot-order independence
        ch = bath_local(0.05, p_therm=0.1)
        assert check_stationarity(ch) < 1e-14

    def test_default_thermal_preset_frozen(self):
        ch = bath_local(0.0, bath=SCAN_BATH)
        dev = check_stationarity(ch, p_therm=0.1)
        assert dev == pytest.approx(0.0056339854047570397, rel=1e-9)
        assert dev > 1e-4

    def test_deviation_monotone_in_occupation(self):
        ch = bath_local(0.0, bath=SCAN_BATH)
        devs = [
            check_stationarity(ch, p_therm=p) for p in (0.0, 0.02, 0.05, 0.1)
        ]
        assert devs[0] < 1e-14
        assert devs[1] == pytest.approx(0.0026291931888866183, rel=1e-9)
        assert devs[2] == pytest.approx(0.0040929955047865063, rel=1e-9)
        for lo, hi in zip(devs, devs[1:]):
            assert hi >= lo

    def test_unequal_durations_closed_form(self):
        # vacuum, one resonant mode: the deviation is exactly the survival
        # amplitude mismatch |cos(G d2) - cos(G d1)|
        eta = 0.2
        ch = bath_local(eta)
        g = np.arcsin(np.sqrt(eta))
        d1, d2 = 1.0, 1.7
        dev = check_stationarity(ch, durations=(d1, d2))
        assert dev == pytest.approx(abs(np.cos(g * d2) - np.cos(g * d1)), abs=1e-11)

    def test_gap_shifts_thermal_deviation(self):
        ch = bath_local(0.0, bath=SCAN_BATH)
        gapped = check_stationarity(ch, start_times=(0.0, 1.9), p_therm=0.1)
        assert gapped == pytest.approx(0.10980463540870745, rel=1e-9)
        with pytest.raises(ValueError, match="overlap"):
            check_stationarity(ch, start_times=(0.0, 0.5))

    def test_requires_channel_type(self):
        with pytest.raises(TypeError, match="Channel"):
            check_stationarity("not a channel")


class TestDefaultLossBath:
    def test_closed_form_coupling(self):
        b = default_loss_bath(0.2, dwell=2.0)
        assert b.couplings[0] == pytest.approx(
            np.arcsin(np.sqrt(0.2)) / 2.0, abs=TOL
        )
        assert b.detunings == (0.0,)

    def test_validation(self):
        with pytest.raises(ValueError, match="eta"):
            default_loss_bath(1.0)
        with pytest.raises(ValueError, match="dwell"):
            default_loss_bath(0.1, dwell=0.0)
