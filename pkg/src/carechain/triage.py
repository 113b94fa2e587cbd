"""Rule-based critical / routine classification of a vitals record.

Stands in for a learned classifier: a record is critical when any reading
falls outside its threshold band.
"""

import json

CRITICAL = "critical"
ROUTINE = "routine"

THRESHOLDS = {
    "heart_rate": (40, 120),
    "spo2": (90, 100),
    "temperature": (35.0, 39.5),
    "systolic": (90, 180),
}


def classify(vitals: dict) -> str:
    for name, (low, high) in THRESHOLDS.items():
        value = vitals.get(name)
        if value is not None and not low <= value <= high:
            return CRITICAL
    return ROUTINE


def classify_bytes(record: bytes) -> str:
    try:
        vitals = json.loads(record)
    except ValueError:
        return ROUTINE
    return classify(vitals) if isinstance(vitals, dict) else ROUTINE
