import itertools

import numpy as np
import pytest

from dhoi.errors import ContractError, RangeError
from dhoi.evaluation import (
    DetRecord,
    EvalProtocol,
    EvalReport,
    GTRecord,
    average_precision,
    class_frequencies,
    evaluate,
    filter_unseen,
    iou,
    make_splits,
    match_detections,
)


def oracle_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def oracle_greedy_flags(dets, gts, thr=0.5):
    """Independent greedy matcher: best min-IoU unconsumed GT per detection."""
    free = list(range(len(gts)))
    flags = []
    for d in dets:
        overlaps = [(min(oracle_iou(d.human_box, gts[j].human_box),
                         oracle_iou(d.object_box, gts[j].object_box)), j)
                    for j in free]
        overlaps = [(o, j) for o, j in overlaps if o >= thr]
        if overlaps:
            o, j = max(overlaps, key=lambda t: t[0])
            free.remove(j)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def oracle_ap(flags, n_gt):
    """AP = sum over TPs of the interpolated precision at that recall step."""
    if n_gt == 0:
        return 0.0
    prec_at = [sum(flags[:j + 1]) / (j + 1) for j in range(len(flags))]
    total = 0.0
    for i, f in enumerate(flags):
        if f:
            total += max(prec_at[i:]) / n_gt
    return total


def random_scene(rng, n_images=2, n_classes=2, n_dets=6, n_gts=4):
    classes = [("act%d" % c, "obj%d" % c) for c in range(n_classes)]

    def box():
        x1, y1 = rng.uniform(0, 50, 2)
        w, h = rng.uniform(5, 40, 2)
        return (float(x1), float(y1), float(x1 + w), float(y1 + h))

    gts, dets = [], []
    for _ in range(n_gts):
        a, o = classes[rng.integers(n_classes)]
        gts.append(GTRecord(f"im{rng.integers(n_images)}", a, o, box(), box()))
    for _ in range(n_dets):
        if gts and rng.random() < 0.6:
            g = gts[rng.integers(len(gts))]
            def jit(b):
                dx, dy = rng.uniform(-4, 4, 2)
                s = rng.uniform(0.8, 1.2)
                w, h = (b[2] - b[0]) * s, (b[3] - b[1]) * s
                return (b[0] + dx, b[1] + dy, b[0] + dx + w, b[1] + dy + h)
            dets.append(DetRecord(g.image_id, g.action, g.object_class,
                                  jit(g.human_box), jit(g.object_box),
                                  float(rng.random())))
        else:
            a, o = classes[rng.integers(n_classes)]
            dets.append(DetRecord(f"im{rng.integers(n_images)}", a, o, box(),
                                  box(), float(rng.random())))
    return dets, gts


def oracle_evaluate(dets, gts, setup="default", thr=0.5):
    classes = sorted({g.hoi_class for g in gts} | {d.hoi_class for d in dets})
    images_with = {}
    for g in gts:
        images_with.setdefault(g.object_class, set()).add(g.image_id)
    aps = {}
    for cls in classes:
        cgts = [g for g in gts if g.hoi_class == cls]
        cdets = [d for d in dets if d.hoi_class == cls]
        if setup == "known_object":
            allow = images_with.get(cls[1], set())
            cdets = [d for d in cdets if d.image_id in allow]
        cdets.sort(key=lambda d: -d.score)
        flags = []
        consumed = set()
        for d in cdets:
            cands = [(min(oracle_iou(d.human_box, g.human_box),
                          oracle_iou(d.object_box, g.object_box)), j)
                     for j, g in enumerate(cgts)
                     if g.image_id == d.image_id and j not in consumed]
            cands = [(o, j) for o, j in cands if o >= thr]
            if cands:
                o, j = max(cands, key=lambda t: t[0])
                consumed.add(j)
                flags.append(True)
            else:
                flags.append(False)
        if not cgts and not cdets:
            continue
        aps[cls] = oracle_ap(flags, len(cgts))
    scored = [ap for cls, ap in aps.items()
              if any(g.hoi_class == cls for g in gts)]
    return aps, (float(np.mean(scored)) if scored else 0.0)


class TestIoU:
    def test_identical(self):
        assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 4, 4), (10, 10, 12, 12)) == 0.0

    def test_area_arithmetic(self):
        assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_degenerate_rejected(self):
        with pytest.raises(ContractError):
            iou((0, 0, 0, 4), (0, 0, 4, 4))


class TestMatchDetections:
    def _det(self, hb, ob, score):
        return DetRecord("im0", "a", "o", hb, ob, score)

    def _gt(self, hb, ob):
        return GTRecord("im0", "a", "o", hb, ob)

    def test_perfect_overlap_tp(self):
        det = self._det((0, 0, 4, 4), (5, 5, 9, 9), 0.9)
        gt = self._gt((0, 0, 4, 4), (5, 5, 9, 9))
        assert match_detections([det], [gt]) == [True]

    def test_single_consumption(self):
        d1 = self._det((0, 0, 4, 4), (5, 5, 9, 9), 0.9)
        d2 = self._det((0, 0, 4, 4), (5, 5, 9, 9), 0.8)
        gt = self._gt((0, 0, 4, 4), (5, 5, 9, 9))
        assert match_detections([d1, d2], [gt]) == [True, False]

    def test_min_rule(self):
        # human IoU perfect but object IoU below threshold -> FP
        det = self._det((0, 0, 4, 4), (5, 5, 9, 9), 0.9)
        gt = self._gt((0, 0, 4, 4), (20, 20, 24, 24))
        assert match_detections([det], [gt]) == [False]

    def test_randomized_vs_independent_oracle(self):
        rng = np.random.default_rng(77)
        for _ in range(200):
            dets, gts = random_scene(rng, n_images=1, n_classes=1,
                                     n_dets=10, n_gts=4)
            dets.sort(key=lambda d: -d.score)
            assert match_detections(dets, gts) == oracle_greedy_flags(dets, gts)


class TestAveragePrecision:
    def test_single_tp(self):
        assert average_precision([True], 1) == 1.0

    def test_fp_then_tp(self):
        assert average_precision([False, True], 1) == pytest.approx(0.5)

    def test_partial_recall(self):
        assert average_precision([True, True], 4) == pytest.approx(0.5)

    def test_zero_gt(self):
        assert average_precision([False, False], 0) == 0.0

    def test_matches_oracle_on_random_flag_strings(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            n = int(rng.integers(1, 12))
            flags = [bool(b) for b in rng.integers(0, 2, n)]
            n_gt = max(sum(flags), int(rng.integers(1, 8)))
            assert average_precision(flags, n_gt) == pytest.approx(
                oracle_ap(flags, n_gt), abs=1e-9)

    def test_tp_prepend_monotone(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            flags = [bool(b) for b in rng.integers(0, 2, 8)]
            n_gt = sum(flags) + 2
            base = average_precision(flags, n_gt)
            assert average_precision([True] + flags, n_gt) >= base
            assert average_precision([False] + flags, n_gt) <= base


class TestEvaluate:
    def _perfect(self):
        gts = [GTRecord("im0", "ride", "horse", (0, 0, 4, 4), (5, 5, 9, 9)),
               GTRecord("im1", "hold", "cup", (1, 1, 3, 3), (4, 4, 8, 8))]
        dets = [DetRecord(g.image_id, g.action, g.object_class, g.human_box,
                          g.object_box, 0.9) for g in gts]
        return dets, gts

    def test_perfect_detections(self):
        dets, gts = self._perfect()
        report = evaluate(dets, gts, EvalProtocol())
        assert all(ap == 1.0 for ap in report.per_class_ap.values())
        assert report.aggregates["full"] == 1.0

    def test_empty_detections(self):
        _, gts = self._perfect()
        report = evaluate([], gts, EvalProtocol())
        assert report.aggregates["full"] == 0.0
        assert set(report.per_class_ap) == {("ride", "horse"), ("hold", "cup")}

    def test_known_object_at_least_default(self):
        rng = np.random.default_rng(21)
        for _ in range(40):
            dets, gts = random_scene(rng, n_images=3, n_classes=3,
                                     n_dets=12, n_gts=6)
            d = evaluate(dets, gts, EvalProtocol(setup="default"))
            k = evaluate(dets, gts, EvalProtocol(setup="known_object"))
            for cls, ap in d.per_class_ap.items():
                if d.counts[cls] > 0:
                    assert k.per_class_ap[cls] >= ap - 1e-12

    def test_micro_scenes_match_brute_force_oracle(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            dets, gts = random_scene(rng, n_images=int(rng.integers(1, 4)),
                                     n_classes=int(rng.integers(1, 4)),
                                     n_dets=int(rng.integers(0, 9)),
                                     n_gts=int(rng.integers(1, 6)))
            for setup in ("default", "known_object"):
                report = evaluate(dets, gts, EvalProtocol(setup=setup))
                aps, full = oracle_evaluate(dets, gts, setup=setup)
                for cls, ap in aps.items():
                    assert report.per_class_ap[cls] == pytest.approx(ap,
                                                                     abs=1e-9)
                assert report.aggregates["full"] == pytest.approx(full, abs=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(13)
        dets, gts = random_scene(rng, n_dets=8, n_gts=5)
        a = evaluate(dets, gts, EvalProtocol())
        b = evaluate(dets, list(reversed(gts)), EvalProtocol())
        assert a.per_class_ap == b.per_class_ap

    def test_partitions_reported(self):
        dets, gts = self._perfect()
        proto = EvalProtocol(partitions={"rare": {("ride", "horse")},
                                         "non_rare": {("hold", "cup")}})
        report = evaluate(dets, gts, proto)
        assert report.aggregates["rare"] == 1.0
        assert report.aggregates["non_rare"] == 1.0

    def test_report_json_shape(self):
        import json

        dets, gts = self._perfect()
        doc = json.loads(evaluate(dets, gts, EvalProtocol()).to_json())
        assert doc["protocol"] == "default"
        assert {e["hoi_id"] for e in doc["per_class"]} == {"ride:horse",
                                                           "hold:cup"}

    def test_bad_protocol(self):
        with pytest.raises(ContractError):
            EvalProtocol(setup="weird")
        with pytest.raises(RangeError):
            EvalProtocol(iou_threshold=1.5)


def make_doc(class_counts):
    """Dataset doc with the requested number of HOIs per (action, object)."""
    images, annotations = [], []
    idx = 0
    for (action, obj), count in class_counts.items():
        for _ in range(count):
            iid = f"im{idx:04d}"
            idx += 1
            images.append({"id": iid, "path": f"{iid}.png", "width": 64,
                           "height": 64})
            annotations.append({
                "image_id": iid,
                "humans": [[0.0, 0.0, 10.0, 10.0]],
                "objects": [{"box": [20.0, 20.0, 30.0, 30.0], "category": obj}],
                "hois": [{"human_idx": 0, "object_idx": 0, "action": action}],
            })
    actions = sorted({a for a, _ in class_counts})
    objects = sorted({o for _, o in class_counts})
    return {"source": "fixture", "images": images, "annotations": annotations,
            "vocab": {"actions": actions, "objects": objects}}


class TestSplits:
    COUNTS = {("a", "p"): 10, ("b", "q"): 8, ("c", "r"): 3, ("d", "s"): 2,
              ("e", "t"): 1}

    def test_rf_uc_takes_rarest(self):
        doc = make_doc(self.COUNTS)
        seen, unseen = make_splits(doc, "rf_uc", unseen_count=2)
        assert unseen == {("d", "s"), ("e", "t")}
        assert seen == set(self.COUNTS) - unseen

    def test_nf_uc_takes_most_frequent(self):
        doc = make_doc(self.COUNTS)
        _, unseen = make_splits(doc, "nf_uc", unseen_count=2)
        assert unseen == {("a", "p"), ("b", "q")}

    def test_uv_membership(self):
        counts = {("ride", "horse"): 3, ("ride", "bicycle"): 2,
                  ("hold", "cup"): 4}
        _, unseen = make_splits(make_doc(counts), "uv", uv_verbs=["ride"])
        assert unseen == {("ride", "horse"), ("ride", "bicycle")}

    def test_uo_membership(self):
        counts = {("ride", "horse"): 3, ("feed", "horse"): 2,
                  ("hold", "cup"): 4}
        _, unseen = make_splits(make_doc(counts), "uo", uo_objects=["horse"])
        assert unseen == {("ride", "horse"), ("feed", "horse")}

    def test_partition_property(self):
        doc = make_doc(self.COUNTS)
        seen, unseen = make_splits(doc, "rf_uc", unseen_count=3)
        assert seen | unseen == set(self.COUNTS)
        assert seen & unseen == set()

    def test_count_exceeds_vocab(self):
        with pytest.raises(RangeError):
            make_splits(make_doc(self.COUNTS), "rf_uc", unseen_count=6)

    def test_filter_removes_all_unseen(self):
        doc = make_doc(self.COUNTS)
        _, unseen = make_splits(doc, "rf_uc", unseen_count=2)
        filtered = filter_unseen(doc, unseen)
        for ann in filtered["annotations"]:
            for hoi in ann["hois"]:
                obj = ann["objects"][hoi["object_idx"]]
                assert (hoi["action"], obj["category"]) not in unseen

    def test_class_frequencies(self):
        assert class_frequencies(make_doc(self.COUNTS)) == self.COUNTS
