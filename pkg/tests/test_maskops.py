import math

import numpy as np
import pytest

from trackprune import maskops
from trackprune.maskops import (
    PALETTE,
    BBox,
    RleError,
    RleMask,
    boundary_f,
    bbox_of,
    expand_bbox,
    largest_area_frame,
    make_reference_image,
    mask_centroid,
    mask_iou,
    merge_tracks,
    render_overlay,
    rle_decode,
    rle_encode,
)
from trackprune.model import BitMask, MaskTrack, VideoRef


# ---------------------------------------------------------------------------
# independent oracles (brute force; must not call into trackprune internals)

def oracle_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = 0
    union = 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            if a[y, x] and b[y, x]:
                inter += 1
            if a[y, x] or b[y, x]:
                union += 1
    return 1.0 if union == 0 else inter / union


def oracle_boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                    out[y, x] = True
                    break
    return out


def oracle_boundary_f(pred, gt, tolerance_ratio):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    h, w = pred.shape
    radius = math.floor(tolerance_ratio * math.hypot(h, w) + 0.5)
    pb = [(y, x) for y in range(h) for x in range(w) if oracle_boundary(pred)[y, x]]
    gb = [(y, x) for y in range(h) for x in range(w) if oracle_boundary(gt)[y, x]]

    def within(p, pts):
        return any((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 <= radius * radius for q in pts)

    precision = sum(within(p, gb) for p in pb) / len(pb)
    recall = sum(within(q, pb) for q in gb) / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------

class TestRleCodec:
    def test_all_zero(self):
        rle = rle_encode(np.zeros((2, 2), dtype=np.uint8))
        assert rle.counts == (4,)
        assert rle.size == (2, 2)

    def test_all_one(self):
        rle = rle_encode(np.ones((2, 2), dtype=np.uint8))
        assert rle.counts == (0, 4)

    def test_column_major_order(self):
        # 2x3 raster with a single pixel at row 0, col 1: column-major index 2
        raster = np.zeros((2, 3), dtype=np.uint8)
        raster[0, 1] = 1
        assert rle_encode(raster).counts == (2, 1, 3)

    def test_round_trip_random(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            h = int(rng.integers(1, 17))
            w = int(rng.integers(1, 17))
            raster = (rng.random((h, w)) < rng.random()).astype(np.uint8)
            assert np.array_equal(rle_decode(rle_encode(raster)), raster)

    def test_decode_rejects_bad_total(self):
        with pytest.raises(RleError):
            rle_decode(RleMask(size=(2, 2), counts=(3,)))

    def test_encode_rejects_non_binary(self):
        with pytest.raises(RleError):
            rle_encode(np.full((2, 2), 7, dtype=np.uint8))

    def test_json_shape(self):
        rle = rle_encode(np.ones((1, 2), dtype=np.uint8))
        assert rle.to_json_dict() == {"size": [1, 2], "counts": [0, 2]}
        assert RleMask.from_json_dict(rle.to_json_dict()) == rle


class TestMaskIou:
    def test_identity(self):
        a = np.ones((3, 3), dtype=np.uint8)
        assert mask_iou(a, a) == 1.0

    def test_disjoint(self):
        a = np.zeros((2, 2), dtype=np.uint8)
        b = np.zeros((2, 2), dtype=np.uint8)
        a[0, 0] = 1
        b[1, 1] = 1
        assert mask_iou(a, b) == 0.0

    def test_hand_counted_overlap(self):
        # 4x4: a = left 2 columns (8 px), b = top 2 rows (8 px), overlap 4 px
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[:, :2] = 1
        b[:2, :] = 1
        assert mask_iou(a, b) == pytest.approx(4 / 12)

    def test_both_empty(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert mask_iou(z, z) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_matches_oracle_and_symmetric(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = (rng.random((8, 8)) < 0.4).astype(np.uint8)
            b = (rng.random((8, 8)) < 0.4).astype(np.uint8)
            assert mask_iou(a, b) == pytest.approx(oracle_iou(a, b), abs=1e-12)
            assert mask_iou(a, b) == mask_iou(b, a)

    def test_monotone_under_shared_pixel_growth(self):
        rng = np.random.default_rng(9)
        a = (rng.random((8, 8)) < 0.3).astype(np.uint8)
        b = (rng.random((8, 8)) < 0.3).astype(np.uint8)
        base = mask_iou(a, b)
        free = np.argwhere((a == 0) & (b == 0))
        if free.size:
            y, x = free[0]
            a2, b2 = a.copy(), b.copy()
            a2[y, x] = b2[y, x] = 1
            assert mask_iou(a2, b2) >= base


class TestBoundaryF:
    def test_identical(self):
        m = np.zeros((16, 16), dtype=np.uint8)
        m[4:10, 5:12] = 1
        for ratio in (0.001, 0.008, 0.1):
            assert boundary_f(m, m, ratio) == 1.0

    def test_pred_empty(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2:5, 2:5] = 1
        assert boundary_f(np.zeros((8, 8), dtype=np.uint8), gt, 0.008) == 0.0

    def test_both_empty(self):
        z = np.zeros((8, 8), dtype=np.uint8)
        assert boundary_f(z, z, 0.008) == 1.0

    def test_shifted_square_within_tolerance(self):
        gt = np.zeros((32, 32), dtype=np.uint8)
        gt[11:21, 11:21] = 1
        pred = np.zeros((32, 32), dtype=np.uint8)
        pred[12:22, 11:21] = 1  # shifted 1 px down
        # ratio chosen so round(ratio * diag) = 2
        ratio = 2.0 / math.hypot(32, 32)
        assert boundary_f(pred, gt, ratio) == 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            pred = np.zeros((12, 12), dtype=np.uint8)
            gt = np.zeros((12, 12), dtype=np.uint8)
            y, x = rng.integers(1, 6, size=2)
            pred[y:y + 5, x:x + 4] = 1
            y, x = rng.integers(1, 6, size=2)
            gt[y:y + 4, x:x + 5] = 1
            for ratio in (0.05, 0.15):
                assert boundary_f(pred, gt, ratio) == pytest.approx(
                    oracle_boundary_f(pred, gt, ratio), abs=1e-12
                )

    def test_swap_symmetric(self):
        rng = np.random.default_rng(23)
        a = (rng.random((10, 10)) < 0.4).astype(np.uint8)
        b = (rng.random((10, 10)) < 0.4).astype(np.uint8)
        assert boundary_f(a, b, 0.05) == pytest.approx(boundary_f(b, a, 0.05))


def track_from(frames, track_id=0, concept="obj"):
    return MaskTrack(
        track_id=track_id,
        concept=concept,
        masks={t: BitMask.from_array(np.asarray(r, dtype=np.uint8)) for t, r in frames.items()},
    )


class TestMergeTracks:
    def test_single_track_identity(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[1:3, 1:3] = 1
        track = track_from({0: m, 2: m})
        merged = merge_tracks([track], num_frames=3, height=4, width=4)
        assert set(merged.masks) == {0, 2}
        assert np.array_equal(merged.masks[0].to_array(), m)

    def test_disjoint_union_area(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, :] = 1
        b[3, :] = 1
        merged = merge_tracks(
            [track_from({1: a}), track_from({1: b}, track_id=1)], num_frames=2, height=4, width=4
        )
        assert merged.masks[1].area == 8

    def test_matches_per_pixel_or(self):
        rng = np.random.default_rng(31)
        tracks = []
        for i in range(3):
            frames = {
                t: (rng.random((5, 5)) < 0.5).astype(np.uint8)
                for t in rng.choice(6, size=3, replace=False)
            }
            tracks.append(track_from(frames, track_id=i))
        merged = merge_tracks(tracks, num_frames=6, height=5, width=5)
        for t in range(6):
            expected = np.zeros((5, 5), dtype=bool)
            for track in tracks:
                if t in track.masks:
                    expected |= track.masks[t].to_array().astype(bool)
            got = merged.masks[t].to_array().astype(bool) if t in merged.masks else np.zeros((5, 5), bool)
            assert np.array_equal(got, expected)

    def test_empty_input(self):
        merged = merge_tracks([], num_frames=4, height=3, width=3)
        assert merged.masks == {}

    def test_commutative_up_to_metadata(self):
        rng = np.random.default_rng(37)
        a = track_from({0: (rng.random((4, 4)) < 0.5).astype(np.uint8)}, track_id=0)
        b = track_from({0: (rng.random((4, 4)) < 0.5).astype(np.uint8)}, track_id=1)
        ab = merge_tracks([a, b], 1, 4, 4)
        ba = merge_tracks([b, a], 1, 4, 4)
        assert np.array_equal(ab.masks[0].to_array(), ba.masks[0].to_array())


class TestRenderOverlay:
    def test_no_candidates_is_identity(self):
        frame = np.random.default_rng(1).integers(0, 255, size=(16, 16, 3)).astype(np.uint8)
        out = render_overlay(frame, [], alpha=0.5)
        assert np.array_equal(out, frame)

    def test_full_frame_alpha_one(self):
        frame = np.zeros((12, 12, 3), dtype=np.uint8)
        mask = np.ones((12, 12), dtype=np.uint8)
        out = render_overlay(frame, [(0, mask)], alpha=1.0)
        assert np.array_equal(out, np.broadcast_to(np.array(PALETTE[0], np.uint8), out.shape))

    def test_two_candidates_use_their_palette_slots(self):
        frame = np.zeros((20, 20, 3), dtype=np.uint8)
        m0 = np.zeros((20, 20), dtype=np.uint8)
        m1 = np.zeros((20, 20), dtype=np.uint8)
        m0[2:8, 2:8] = 1
        m1[12:18, 12:18] = 1
        out = render_overlay(frame, [(0, m0), (1, m1)], alpha=1.0)
        assert tuple(out[4, 4]) == PALETTE[0]
        assert tuple(out[14, 14]) == PALETTE[1]
        assert tuple(out[4, 4]) != tuple(out[14, 14])

    def test_pixels_far_from_masks_untouched(self):
        rng = np.random.default_rng(2)
        frame = rng.integers(0, 255, size=(24, 24, 3)).astype(np.uint8)
        mask = np.zeros((24, 24), dtype=np.uint8)
        mask[2:6, 2:6] = 1
        out = render_overlay(frame, [(3, mask)], alpha=0.5)
        # glyph box around the centroid plus the mask itself; everything well
        # outside both regions must be bit-identical
        assert np.array_equal(out[16:, 16:], frame[16:, 16:])

    def test_empty_candidate_skipped(self):
        frame = np.full((8, 8, 3), 9, dtype=np.uint8)
        out = render_overlay(frame, [(0, np.zeros((8, 8), dtype=np.uint8))], alpha=0.7)
        assert np.array_equal(out, frame)


class TestReferenceImage:
    def make_video(self, tmp_path, num_frames=3, w=24, h=18):
        from PIL import Image

        rng = np.random.default_rng(4)
        paths = []
        for t in range(num_frames):
            arr = rng.integers(0, 255, size=(h, w, 3)).astype(np.uint8)
            p = tmp_path / f"{t:05d}.png"
            Image.fromarray(arr).save(p)
            paths.append(str(p))
        return VideoRef(video_id="v", frame_paths=tuple(paths), width=w, height=h)

    def test_bbox_brute_force(self):
        raster = np.zeros((10, 8), dtype=np.uint8)
        raster[3:8, 2:6] = 1
        box = bbox_of(raster)
        ys, xs = np.nonzero(raster)
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (
            xs.min(), ys.min(), xs.max(), ys.max(),
        )
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (2, 3, 5, 7)

    def test_largest_area_earliest_tie(self):
        def square(n):
            m = np.zeros((18, 24), dtype=np.uint8)
            m[:n, :n] = 1
            return m

        track = track_from({0: square(3), 1: square(7), 2: square(7)})
        assert largest_area_frame(track) == 1

    def test_chosen_frame_and_panels(self, tmp_path):
        video = self.make_video(tmp_path)
        m_small = np.zeros((18, 24), dtype=np.uint8)
        m_small[4:6, 4:6] = 1
        m_big = np.zeros((18, 24), dtype=np.uint8)
        m_big[5:12, 6:14] = 1
        track = track_from({0: m_small, 1: m_big})
        out = make_reference_image(video, track, pad_factor=1.0)
        frame1 = maskops.load_frame(video.frame_paths[1])
        tight = frame1[5:12, 6:14]
        left = out[: tight.shape[0], : tight.shape[1]]
        right = out[: tight.shape[0], tight.shape[1] + 4 :]
        assert np.array_equal(right, tight)
        # pad_factor=1: left equals right except the 1-px outline ring
        assert np.array_equal(left[1:-1, 1:-1], tight[1:-1, 1:-1])

    def test_empty_track_fails(self, tmp_path):
        video = self.make_video(tmp_path)
        track = track_from({0: np.zeros((18, 24), dtype=np.uint8)})
        with pytest.raises(ValueError):
            make_reference_image(video, track)

    def test_expand_bbox_clamps(self):
        box = BBox(x_min=0, y_min=0, x_max=3, y_max=3)
        grown = expand_bbox(box, 2.0, width=10, height=10)
        assert (grown.x_min, grown.y_min) == (0, 0)
        assert grown.x_max == 5 and grown.y_max == 5

    def test_centroid(self):
        m = np.zeros((5, 5), dtype=np.uint8)
        m[2, 1:4] = 1
        assert mask_centroid(m) == (2.0, 2.0)
