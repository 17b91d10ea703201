"""Record encoding shared by every tier of the structure.

A record is a plain tuple ``(value, seq, kind)`` so comparisons and sorting
stay in C.  ``value`` is the key (uint64 range), ``seq`` a globally unique
timestamp assigned at operation time, ``kind`` one of the constants below.
Delete signals carry the key they cancel and always have a larger ``seq``
than the insert they target, so sorting by ``(value, seq)`` places a signal
directly after the live insert it cancels.
"""

INSERT = 0
DELETE_SIGNAL = 1
META = 2  # navigation-list field slots, never user data
