import math

import numpy as np
import pytest

from dsvid import codec as cd
from dsvid import delivery as dl
from dsvid import frames as fr
from dsvid import netsim as ns


@pytest.fixture(scope="module")
def clip16():
    return fr.synthetic_clip(64, 64, 16, seed=2)


@pytest.fixture(scope="module")
def table16(clip16):
    return ns.build_quality_table(clip16, cd.default_levels())


def _cfg(clip, scheme, trace, table=None, **kw):
    return ns.SimConfig(clip, ns.Scheme(scheme), trace, table=table,
                        k_patch=kw.pop("k_patch", 4), **kw)


class TestTraces:
    def test_load_trace_rate_arithmetic(self, tmp_path):
        p = tmp_path / "t.trace"
        p.write_text("1\n2\n3\n")
        tr = ns.load_trace(str(p))
        assert tr.mean_rate_bps() == pytest.approx(12_000_000)

    def test_single_line_trace(self, tmp_path):
        p = tmp_path / "t.trace"
        p.write_text("1000\n")
        tr = ns.load_trace(str(p))
        assert tr.mean_rate_bps() == pytest.approx(12_000)

    def test_malformed_and_empty_rejected(self, tmp_path):
        bad = tmp_path / "bad.trace"
        bad.write_text("1\nx\n")
        with pytest.raises(ns.TraceFormatError):
            ns.load_trace(str(bad))
        empty = tmp_path / "empty.trace"
        empty.write_text("\n")
        with pytest.raises(ns.TraceFormatError):
            ns.load_trace(str(empty))
        with pytest.raises(ns.TraceFormatError):
            ns.LinkTrace((5, 3), 10)   # unsorted

    def test_step_trace_counting_oracle(self):
        sched = [(1900, 12_000_000), (1100, 2_400_000)]
        tr = ns.step_trace(sched)
        # independent count: opportunities per window = duration * rate /
        # (1500 * 8 * 1000), within one packet
        first = sum(1 for t in tr.opportunities if t <= 1900)
        second = len(tr.opportunities) - first
        assert abs(first - 1900 * 12e6 / 12e6) <= 1
        assert abs(second - 1100 * 2.4e6 / 12e6) <= 1

    def test_constant_trace_rate(self):
        tr = ns.constant_trace(3_000_000)
        assert tr.mean_rate_bps() == pytest.approx(3_000_000, rel=0.01)

    def test_cursor_consumes_each_opportunity_once(self):
        tr = ns.LinkTrace((2, 5, 9), 10)
        cur = ns._Cursor(tr)
        times = [cur.next_at(0.0) for _ in range(6)]
        assert times == [2, 5, 9, 12, 15, 19]   # wraps cyclically

    def test_cursor_skips_to_requested_time(self):
        cur = ns._Cursor(ns.LinkTrace((2, 5, 9), 10))
        assert cur.next_at(6.0) == 9
        assert cur.next_at(6.0) == 12


class TestCongestionControl:
    def test_overuse_multiplies_by_085(self):
        st = ns.CCState("gcc", 1_000_000)
        st.prev_owd = 10.0
        st.window = [(0.0, 15.0, 1200, 1.0)]   # owd grew 10 -> 15
        got = ns.cc_step(st, 1.5, rtt=200.0, frame_interval=40.0,
                         ceiling_bps=1e8)
        assert got == pytest.approx(850_000)

    def test_stable_delay_probes_up(self):
        st = ns.CCState("gcc", 1_000_000)
        st.prev_owd = 10.0
        st.window = [(0.0, 10.0, 1200, 1.0)]
        got = ns.cc_step(st, 1.5, 200.0, 40.0, 1e8)
        assert got == pytest.approx(1_050_000)

    def test_salsify_tracks_acked_bytes(self):
        st = ns.CCState("salsify", 1_200_000)
        # 30 KB acked within the last RTT of 200 ms
        st.window = [(0.0, 100.0, 30_000, 50.0)]
        got = ns.cc_step(st, 100.0, 200.0, 40.0, 1e8)
        measured = 30_000 * 8 * 1000.0 / 200.0   # 1.2 Mbps
        assert got == pytest.approx(max(1.2 * measured, 1.08 * 1_200_000))

    def test_rate_clamped_to_ceiling(self):
        st = ns.CCState("gcc", 100_000)
        for _ in range(40):
            st.window = [(0.0, 100.0, 1200, 1.0)]
            st.prev_owd = 100.0   # stable delay -> additive increase
            ns.cc_step(st, 1.5, 200.0, 40.0, ceiling_bps=500_000)
        assert st.rate_bps == pytest.approx(500_000)

    def test_rate_clamped_to_floor(self):
        st = ns.CCState("gcc", 60_000)
        for _ in range(40):
            st.window = [(0.0, 200.0, 1200, 1.0)]
            st.prev_owd = 100.0   # growing delay -> multiplicative cut
            ns.cc_step(st, 1.5, 200.0, 40.0, 1e8)
        assert st.rate_bps == pytest.approx(ns.RATE_FLOOR_BPS)

    def test_gcc_converges_near_link_rate(self, clip16, table16):
        trace = ns.constant_trace(3_000_000)
        tiled = ns.QualityTable(np.tile(table16.bytes_, (6, 1)),
                                np.tile(table16.psnr_, (6, 1)),
                                np.tile(table16.ssim_, (6, 1)),
                                table16.level_ids)
        cfg = _cfg(list(clip16) * 6, "FrameSkip", trace, table=tiled)
        session = ns._FrameSkipSession(cfg)
        import heapq
        for i in range(len(cfg.clip)):
            session.push(i * 40.0, ns._EV_FRAME, i)
        end = len(cfg.clip) * 40.0
        while session.events:
            now, _, kind, data = heapq.heappop(session.events)
            if now > end:
                break
            if kind == ns._EV_FRAME:
                session.on_frame(now, data)
            elif kind == ns._EV_SERVICE:
                session.handle_service(now)
            elif kind == ns._EV_ARRIVE:
                session.handle_arrive(now, data)
            elif kind == ns._EV_FEEDBACK:
                session.on_feedback(now, data)
        assert abs(session.cc.rate_bps - 3_000_000) <= 0.2 * 3_000_000


class TestPercentile:
    def test_nearest_rank_hand_values(self):
        vals = list(range(1, 101))
        assert ns.percentile_nearest_rank(vals, 95.0) == 95
        assert ns.percentile_nearest_rank([7.0], 95.0) == 7.0
        assert ns.percentile_nearest_rank([1.0, 2.0], 95.0) == 2.0
        assert math.isnan(ns.percentile_nearest_rank([], 95.0))


class TestQualityTable:
    def test_monotone_in_level(self, table16):
        # coarser levels: fewer bytes, weakly lower quality
        assert (np.diff(table16.bytes_.sum(axis=0)) <= 0).all()
        mean_psnr = table16.psnr_.mean(axis=0)
        assert mean_psnr[0] > mean_psnr[-1]

    def test_pick_largest_fitting(self, table16):
        row = table16.bytes_[0]
        budget = int(row[3])
        col = table16.pick(0, budget)
        assert row[col] <= budget
        assert col <= 3
        assert table16.pick(0, 1) == int(np.argmin(row))


class TestSimulateInvariants:
    @pytest.mark.parametrize("scheme", ns.SCHEMES)
    def test_conservation_and_causality(self, clip16, table16, scheme):
        trace = ns.step_trace([(300, 2_000_000), (340, 600_000)])
        report = ns.simulate(_cfg(clip16, scheme, trace, table=table16))
        assert report.packets_sent == report.packets_delivered + \
            report.packets_dropped + report.packets_in_flight
        for f in report.frames:
            if not f.skipped and not math.isnan(f.delay):
                assert f.delay >= 100.0 - 1e-9   # one-way delay floor

    @pytest.mark.parametrize("scheme", ("DataScalable", "FrameSkip",
                                        "Retransmit"))
    def test_deterministic(self, clip16, table16, scheme):
        trace = ns.step_trace([(300, 2_000_000), (340, 600_000)])
        a = ns.simulate(_cfg(clip16, scheme, trace, table=table16))
        b = ns.simulate(_cfg(clip16, scheme, trace, table=table16))
        for x, y in zip(a.frames, b.frames):
            assert (x.frame_index, x.delay, x.quality, x.skipped) == \
                (y.frame_index, y.delay, y.quality, y.skipped)

    def test_overload_drops_packets(self, clip16, table16):
        trace = ns.constant_trace(1_000_000)
        report = ns.simulate(_cfg(clip16, "FrameSkip", trace, table=table16,
                                  cc_initial_bps=4_000_000.0,
                                  path=ns.PathConfig(queue_capacity=4,
                                                     mtu=300)))
        assert report.packets_dropped > 0

    def test_unconstrained_path_delay_identity(self, clip16, table16):
        # one opportunity per millisecond: delay = serialization (1 ms per
        # packet) + one-way delay, within a millisecond of slack
        trace = ns.constant_trace(12_000_000)
        for scheme in ("DataScalable", "FrameSkip", "Retransmit"):
            report = ns.simulate(_cfg(clip16, scheme, trace, table=table16))
            for f in report.frames:
                assert not f.skipped
                assert f.delay <= 100.0 + f.packets_sent + 1.0
            agg = report.aggregates()
            p95_bound = 100.0 + max(f.packets_sent for f in report.frames) + 1.0
            assert agg["p95_delay"] <= p95_bound

    def test_empty_clip_rejected(self):
        with pytest.raises(ns.ConfigError):
            ns.SimConfig([], ns.Scheme("FrameSkip"), ns.constant_trace(1e6))

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ns.ConfigError):
            ns.Scheme("Quantum")


_DIP = [(200, 2_000_000), (500, 50_000), (300, 2_000_000)]


def _tiled(table, reps):
    return ns.QualityTable(np.tile(table.bytes_, (reps, 1)),
                           np.tile(table.psnr_, (reps, 1)),
                           np.tile(table.ssim_, (reps, 1)),
                           table.level_ids)


class TestFrameSkipConvention:
    def test_skipped_frame_uses_next_decode_time(self, clip16, table16):
        report = ns.simulate(_cfg(list(clip16) * 3, "FrameSkip",
                                  ns.step_trace(_DIP),
                                  table=_tiled(table16, 3),
                                  cc_initial_bps=2_000_000.0,
                                  path=ns.PathConfig(queue_capacity=10)))
        frames = report.frames
        skipped = [f for f in frames if f.skipped]
        assert skipped, "scenario should force at least one skip"
        for f in skipped:
            later = [g for g in frames
                     if g.frame_index > f.frame_index and not g.skipped]
            if later:
                nxt = min(later, key=lambda g: g.frame_index)
                assert f.decode_end == pytest.approx(nxt.decode_end)


class TestRetransmit:
    def test_loss_recovery_takes_at_least_rto(self, clip16, table16):
        report = ns.simulate(_cfg(clip16, "Retransmit", ns.step_trace(_DIP),
                                  table=table16,
                                  cc_initial_bps=2_000_000.0,
                                  path=ns.PathConfig(queue_capacity=10)))
        assert report.packets_dropped > 0
        # a frame that lost a packet cannot complete before
        # one-way delay + timeout (RTT + 10 ms)
        worst = max(f.delay for f in report.frames
                    if not math.isnan(f.delay))
        assert worst >= 100.0 + 210.0

    def test_no_skips_when_time_allows(self, clip16, table16):
        trace = ns.constant_trace(2_000_000)
        report = ns.simulate(_cfg(clip16, "Retransmit", trace, table=table16))
        assert all(not f.skipped for f in report.frames)


class TestFEC:
    def test_predictor_hand_trace(self, clip16, table16):
        cfg = _cfg(clip16, "IdealFEC", ns.constant_trace(2_000_000),
                   table=table16)
        session = ns._FECSession(cfg)
        # EWMA with weight 0.5 starting at 0: 0.4 -> 0.2, then 0 -> 0.1
        session.loss_ewma = 0.0
        session.loss_ewma += 0.5 * (0.4 - session.loss_ewma)
        assert session.loss_ewma == pytest.approx(0.2)
        session.loss_ewma += 0.5 * (0.0 - session.loss_ewma)
        assert session.loss_ewma == pytest.approx(0.1)
        # predicted_loss folds recent samples on top of the EWMA
        session.loss_samples = [(1000.0, 0.4)]
        est = session.predicted_loss(1100.0)
        assert est == pytest.approx(0.1 + 0.5 * (0.4 - 0.1))

    def test_redundancy_rule(self, clip16, table16):
        # r = 0.5 -> twice the source packets sent
        cfg = _cfg(clip16, "IdealFEC", ns.constant_trace(4_000_000),
                   table=table16)
        session = ns._FECSession(cfg)
        session.loss_ewma = 0.5
        session.on_frame(0.0, 0)
        m = session.meta[0]
        assert m["total"] == math.ceil(m["src"] / 0.5)


class TestSVC:
    def _session(self, clip16, table16):
        cfg = _cfg(clip16, "IdealSVC", ns.constant_trace(4_000_000),
                   table=table16)
        return ns._SVCSession(cfg)

    def test_lost_lower_layer_caps_quality(self, clip16, table16):
        session = self._session(clip16, table16)
        session.records[0] = ns.FrameRecord(0, 0.0)
        session.meta[0] = {"layers": [
            {"col": 8, "need": 2, "got": 2},   # base (coarsest) complete
            {"col": 7, "need": 2, "got": 1},   # layer 2 lost a packet
            {"col": 6, "need": 2, "got": 2},   # higher layers arriving
            {"col": 5, "need": 2, "got": 2},
        ]}
        session.finalize(0, 50.0)
        assert session.records[0].quality == \
            pytest.approx(float(table16.psnr_[0, 8]))

    def test_all_layers_complete_gives_top_quality(self, clip16, table16):
        session = self._session(clip16, table16)
        session.records[0] = ns.FrameRecord(0, 0.0)
        session.meta[0] = {"layers": [
            {"col": 8, "need": 2, "got": 2},
            {"col": 7, "need": 2, "got": 2},
        ]}
        session.finalize(0, 50.0)
        assert session.records[0].quality == \
            pytest.approx(float(table16.psnr_[0, 7]))

    def test_base_layer_lost_skips(self, clip16, table16):
        session = self._session(clip16, table16)
        session.records[0] = ns.FrameRecord(0, 0.0)
        session.meta[0] = {"layers": [{"col": 8, "need": 2, "got": 1}]}
        session.finalize(0, 50.0)
        assert session.records[0].skipped


class TestDataScalableSession:
    def test_degrades_instead_of_skipping(self, clip16):
        report = ns.simulate(_cfg(clip16, "DataScalable", ns.step_trace(_DIP),
                                  policy=dl.DecodePolicy(0.05),
                                  cc_initial_bps=2_000_000.0,
                                  path=ns.PathConfig(queue_capacity=10)))
        assert report.packets_dropped > 0   # congestion actually happened
        # frames that received at least one packet still decode
        for f in report.frames:
            if f.packets_received > 0:
                assert not f.skipped

    def test_quality_tracks_bandwidth(self, clip16):
        rich = ns.simulate(_cfg(clip16, "DataScalable",
                                ns.constant_trace(6_000_000)))
        poor = ns.simulate(_cfg(clip16, "DataScalable",
                                ns.constant_trace(500_000)))
        assert rich.aggregates()["mean_quality"] > \
            poor.aggregates()["mean_quality"]

    def test_aggregates_recomputable_from_records(self, clip16):
        report = ns.simulate(_cfg(clip16, "DataScalable",
                                  ns.constant_trace(2_000_000)))
        agg = report.aggregates()
        delays = sorted(f.delay for f in report.frames
                        if not math.isnan(f.delay))
        rank = max(1, math.ceil(0.95 * len(delays)))
        assert agg["p95_delay"] == delays[rank - 1]
        qual = [f.quality for f in report.frames
                if not f.skipped and not math.isnan(f.quality)]
        assert agg["mean_quality"] == pytest.approx(sum(qual) / len(qual))
