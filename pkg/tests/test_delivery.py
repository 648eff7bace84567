import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsvid import codec as cd
from dsvid import delivery as dl
from dsvid import entropy as ent
from dsvid import frames as fr
from dsvid.frames import InvalidInputError


class TestIpatchRect:
    def test_raster_period(self):
        dims, patch = (1280, 720), (320, 368)
        assert dl.ipatch_rect(0, 8, dims, patch) == (0, 0, 320, 368)
        assert dl.ipatch_rect(8, 8, dims, patch) == (0, 0, 320, 368)
        # row-major raster: index 3 is row 0, col 3 of the 4x2 tiling
        assert dl.ipatch_rect(3, 8, dims, patch) == (960, 0, 320, 368)
        # last row clamps to the frame edge
        assert dl.ipatch_rect(4, 8, dims, patch) == (0, 368, 320, 352)

    def test_coverage_counter(self):
        dims = (320, 256)
        patch = dl.choose_patch_dims(dims, 10)
        hits = np.zeros((256, 320), dtype=int)
        for i in range(10):
            x, y, w, h = dl.ipatch_rect(i, 10, dims, patch)
            hits[y:y + h, x:x + w] += 1
        assert (hits == 1).all()

    def test_patch_larger_than_frame_rejected(self):
        with pytest.raises(InvalidInputError):
            dl.ipatch_rect(0, 1, (64, 64), (128, 128))

    def test_wrong_tile_count_rejected(self):
        with pytest.raises(InvalidInputError):
            dl.ipatch_rect(0, 9, (1280, 720), (320, 360))


class TestChoosePatchDims:
    def test_exact_tilings(self):
        for dims, k in (((320, 256), 10), ((1280, 720), 8), ((64, 64), 4)):
            pw, ph = dl.choose_patch_dims(dims, k)
            assert pw % 16 == 0 and ph % 16 == 0
            import math
            assert math.ceil(dims[0] / pw) * math.ceil(dims[1] / ph) == k

    def test_impossible_layout_rejected(self):
        with pytest.raises(InvalidInputError):
            dl.choose_patch_dims((16, 16), 7)


class TestPacketCountFor:
    def test_thresholds(self):
        assert dl.packet_count_for(640, 360) == 8
        assert dl.packet_count_for(1280, 720) == 16
        assert dl.packet_count_for(1920, 1080) == 24


class TestEstimateProfile:
    def test_cold_start_requires_table(self):
        with pytest.raises(InvalidInputError):
            dl.estimate_profile([], 8)

    def test_cold_start_uses_table(self):
        table = [20, 22, 24, 26, 28, 30, 32, 34, 36]
        prof = dl.estimate_profile([], 8, offline_table=table)
        assert np.allclose(prof.q, table)

    def test_single_anchor_scales_table(self):
        table = [20.0, 25.0, 30.0, 35.0, 40.0]
        prof = dl.estimate_profile([(4, 36.0)], 4, offline_table=table)
        assert prof.q[4] == pytest.approx(36.0)
        # points below the anchor keep the table's shape, rescaled
        assert prof.q[2] == pytest.approx(30.0 * 36.0 / 40.0)

    def test_interpolation_between_points_majorized(self):
        # measured (4, 36) and (8, 40): the profile interpolates between
        # them, then takes the concave majorant, so interior values are
        # at least the linear interpolation and endpoints are anchored
        prof = dl.estimate_profile([(4, 36.0), (8, 40.0)], 8)
        assert prof.q[0] == pytest.approx(36.0)
        assert prof.q[8] == pytest.approx(40.0)
        assert prof.q[6] >= 38.0 - 1e-9

    def test_ewma_hand_trace(self):
        # half-life 10: alpha = 1 - 2^(-1/10); 40 then 30 at n=8
        alpha = 1.0 - 2.0 ** (-1.0 / 10.0)
        prof = dl.estimate_profile([(8, 40.0), (8, 30.0)], 8)
        assert prof.q[8] == pytest.approx(40.0 + alpha * (30.0 - 40.0))

    def test_isotonic_pools_adjacent_violators(self):
        got = dl._isotonic(np.array([37.2, 37.0]))
        assert np.allclose(got, [37.1, 37.1])

    def test_profile_non_decreasing(self):
        prof = dl.estimate_profile([(2, 39.0), (5, 33.0), (8, 36.0)], 8)
        assert (np.diff(prof.q) >= -1e-12).all()

    def test_concavify_properties(self):
        convex = np.array([20.0, 21.0, 21.2, 21.3, 25.0, 31.0])
        out = dl._concavify(convex)
        assert out[0] == pytest.approx(convex[0])
        assert out[-1] == pytest.approx(convex[-1])
        inc = np.diff(out)
        assert (inc >= -1e-12).all()                 # still non-decreasing
        assert (np.diff(inc) <= 1e-12).all()         # concave
        assert (out >= convex - 1e-12).all()         # majorant

    def test_concave_input_unchanged(self):
        concave = np.array([10.0, 18.0, 24.0, 28.0, 30.0])
        assert np.allclose(dl._concavify(concave), concave)


class TestDecodeDeadline:
    def _profile(self, gap):
        q = np.array([0.0, 30.0, 30.0 + gap, 30.0 + 2 * gap])
        return dl.QualityProfile(q)

    def test_formula_arithmetic(self):
        prof = self._profile(1.0)
        t = dl.decode_deadline(500.0, 1, prof, dl.DecodePolicy(0.01))
        assert t == pytest.approx(600.0)

    def test_zero_gain_decodes_immediately(self):
        prof = self._profile(0.0)
        assert dl.decode_deadline(500.0, 1, prof,
                                  dl.DecodePolicy(0.01)) == pytest.approx(500.0)

    def test_index_bounds(self):
        prof = self._profile(1.0)
        pol = dl.DecodePolicy(0.01)
        with pytest.raises(InvalidInputError):
            dl.decode_deadline(0.0, 0, prof, pol)
        with pytest.raises(InvalidInputError):
            dl.decode_deadline(0.0, 3, prof, pol)

    @given(st.floats(0.001, 1.0), st.floats(0.001, 1.0), st.floats(0.0, 5.0))
    @settings(max_examples=50, deadline=None)
    def test_larger_beta_earlier_deadline(self, b1, b2, gap):
        prof = self._profile(gap)
        lo, hi = sorted((b1, b2))
        t_hi = dl.decode_deadline(100.0, 1, prof, dl.DecodePolicy(hi))
        t_lo = dl.decode_deadline(100.0, 1, prof, dl.DecodePolicy(lo))
        assert t_hi <= t_lo + 1e-9

    def test_beta_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            dl.DecodePolicy(0.0)


def _wire_packet(frame_index, packet_index, k=4):
    sym = np.zeros(10, dtype=np.int32)
    tensor = cd.CodedTensor("I", (1, 1, 10), sym, 4.0, 0)
    model = ent.fit_model(tensor)
    from dsvid.packetize import ElementList
    return ent.encode_packet(ElementList(packet_index, sym[:3]), model,
                             frame_index=frame_index, frame_kind="I",
                             packet_count=k, map_seed=0, level_id=0)


class TestOnPacket:
    def _receiver(self, k=4):
        prof = dl.QualityProfile(np.array([0.0, 20, 25, 28, 30]))
        return dl.ReceiverState(k, prof, dl.DecodePolicy(0.02))

    def test_complete_frame_decodes_immediately(self):
        rx = self._receiver()
        for j in range(3):
            action = dl.on_packet(rx, _wire_packet(0, j), now=float(j))
            assert isinstance(action, dl.Wait)
        action = dl.on_packet(rx, _wire_packet(0, 3), now=3.0)
        assert isinstance(action, dl.Decode)
        assert len(action.packets) == 4

    def test_first_packet_sets_deadline_from_profile(self):
        rx = self._receiver()
        action = dl.on_packet(rx, _wire_packet(0, 0), now=100.0)
        assert isinstance(action, dl.Wait)
        assert action.until == pytest.approx(100.0 + (25 - 20) / 0.02)
        assert rx.pending_deadline == (0, action.until)

    def test_future_frame_buffers(self):
        rx = self._receiver()
        action = dl.on_packet(rx, _wire_packet(2, 0), now=0.0)
        assert isinstance(action, dl.Buffer)
        assert rx.pending_deadline is None

    def test_late_packet_counted_discarded(self):
        rx = self._receiver()
        rx.decoded_through = 3
        action = dl.on_packet(rx, _wire_packet(1, 0), now=0.0)
        assert isinstance(action, dl.Buffer)
        assert rx.late_discarded == 1

    def test_mark_decoded_clears_buffers(self):
        rx = self._receiver()
        dl.on_packet(rx, _wire_packet(0, 0), now=0.0)
        dl.on_packet(rx, _wire_packet(1, 0), now=0.0)
        rx.mark_decoded(0)
        assert 0 not in rx.buffers
        assert 1 in rx.buffers
        assert rx.oldest_undecoded() == 1


class TestSenderEncodeNext:
    def test_lossless_channel_references_match(self, levels):
        clip = fr.synthetic_clip(64, 64, 8, seed=2)
        sender = dl.SenderState(levels, 64, 64, k_patch=4)
        quant = {lv.level_id: lv.quant_step for lv in levels}
        rx_state = cd.CodecState()
        for idx, frame in enumerate(clip):
            packets = dl.sender_encode_next(sender, frame, target_bytes=50_000)
            rect = None
            if packets[0].frame_kind == cd.FRAME_P_IPATCH:
                rect = dl.ipatch_rect(idx, 4, (64, 64), sender.patch_dims)
            tensor, _ = ent.packets_to_tensor(
                packets, (6, 32, 32), quant[packets[0].level_id],
                ipatch_rect=rect)
            out = cd.decode(tensor, rx_state)
            rx_state.decoder_reference = out
            assert np.array_equal(out.luma,
                                  sender.codec_state.encoder_reference.luma)

    def test_packet_count_and_headers(self, levels):
        clip = fr.synthetic_clip(64, 64, 2, seed=2)
        sender = dl.SenderState(levels, 64, 64, k_patch=4, session_seed=9)
        packets = dl.sender_encode_next(sender, clip[0], 50_000)
        assert len(packets) == 8
        assert all(p.frame_index == 0 for p in packets)
        assert packets[0].map_seed == 9 ^ 0
        packets = dl.sender_encode_next(sender, clip[1], 50_000)
        assert packets[0].frame_kind == cd.FRAME_P_IPATCH
        assert packets[0].map_seed == 9 ^ 1

    def test_size_history_recorded(self, levels):
        clip = fr.synthetic_clip(64, 64, 3, seed=2)
        sender = dl.SenderState(levels, 64, 64, k_patch=4)
        for frame in clip:
            dl.sender_encode_next(sender, frame, 50_000)
        assert any(sender.size_history.values())
