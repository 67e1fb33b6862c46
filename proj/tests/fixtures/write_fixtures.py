#!/usr/bin/env python3
# Writes scan/label fixtures with nothing but struct, so the C++ readers are
# checked against an independent writer. Prints the f32 bit patterns.
import struct
import sys
from pathlib import Path

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent

points = [
    (0.0, 0.0, 0.0, 0.0),
    (1.5, -2.25, 0.125, 0.5),
    (-0.1, 0.2, 0.3, 0.99),
    (12.345, -67.89, 1.0e-3, 0.0),
    (1.0e6, -1.0e-6, 3.14159265, 1.0),
    (-0.0, 2.0 ** -20, -123.456, 0.25),
    (7.0, 8.0, 9.0, 0.75),
    (-5.5, 5.5, -0.5, 0.01),
    (100.0, 0.001, -100.0, 0.33),
    (0.7, -0.7, 0.07, 0.007),
]
labels = [0, 10, 0x00010033, 252, 40, 0xFFFF0000 | 50, 30, 99, 259, 1]

with open(out / "scan_fixture.bin", "wb") as f:
    for p in points:
        f.write(struct.pack("<4f", *p))
with open(out / "label_fixture.label", "wb") as f:
    for v in labels:
        f.write(struct.pack("<I", v))

for p in points:
    print(" ".join("0x%08x" % struct.unpack("<I", struct.pack("<f", v))[0] for v in p))
