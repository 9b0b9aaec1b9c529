"""Slot accuracy, joint goal accuracy and the error taxonomy on a hand-made grid.

A grid maps (dialogue, turn, domain, slot) to a value. One turn is entirely
right, the other has one of each error kind.
"""
from mope.evaluate import build_report

golds = {
    ("d0", 0, "hotel", "area"): "north",
    ("d0", 0, "hotel", "day"): "none",
    ("d0", 0, "hotel", "stars"): "4",
    ("d0", 1, "hotel", "area"): "north",
    ("d0", 1, "hotel", "day"): "monday",
    ("d0", 1, "hotel", "stars"): "none",
}
preds = dict(golds)
preds[("d0", 1, "hotel", "day")] = "none"      # missed a value: partial
preds[("d0", 1, "hotel", "stars")] = "3"       # invented a value: over
preds[("d0", 1, "hotel", "area")] = "south"    # wrong value: other

report = build_report(preds, golds)
o = report.overall
print(f"SA {o.sa_with_none:.3f}  SA w/o none {o.sa_without_none:.3f}  JGA {o.jga:.3f}")
print("errors:", report.error_counts, "total", report.total_errors)
