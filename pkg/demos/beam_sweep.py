"""Exhaustive beam sweep in a small room with a blocker and a reflecting wall.

Moves the receiver around an opaque box and prints which beam wins. With a
clear line of sight the best beam points at the BS. In the shadow the sweep falls back to the bounce off the south wall, and where both
are blocked every beam reads the SNR floor.
"""
import math

from beamtwin.scene import Blocker, Scene, Wall, build_codebook, sweep, trace_paths

room = Scene(
    (0, 0, 12, 8),
    walls=(Wall((0.3, 0.3), (11.7, 0.3), 6.0),),
    blockers=(Blocker(((6, 3), (7, 3), (7, 4.5), (6, 4.5))),),
    bs_position=(11.5, 3.7),
)
cb = build_codebook()

print(f"{len(cb)} beams, {math.degrees(cb.spacing):.0f} deg apart\n")
print("  receiver    paths                     best  bearing  SNR dB")
for ue in ((5.5, 7.0), (5.5, 2.0), (3.0, 3.7), (5.8, 3.7)):
    paths = trace_paths(room, ue, room.bs_position, 1)
    s = sweep(room, ue, 0.0, cb)
    kinds = ",".join(p.kind for p in paths) or "none"
    print(f"  {str(ue):10s}  {kinds:24s}  {s.best_index:4d}  {math.degrees(cb.centers[s.best_index]):6.0f}  {s.snr[s.best_index]:7.1f}")

# turning the receiver by one beam spacing shifts the winning index by one
a = sweep(room, (2.0, 6.0), 0.0, cb).best_index
b = sweep(room, (2.0, 6.0), cb.spacing, cb).best_index
print(f"\nheading 0 -> beam {a}; heading +10 deg -> beam {b}")
