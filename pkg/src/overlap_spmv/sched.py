"""Best-effort scheduler hints for the communication agent thread.

On a loaded CPU a thread woken by an arriving message may wait a whole
scheduler slice (about 3 ms by default on recent Linux) behind a running
kernel thread.  Linux 6.12+ lets a normal thread ask for a shorter slice
through ``sched_setattr``; a shorter slice lets it preempt sooner after
waking.  Everywhere else these helpers do nothing.
"""

from __future__ import annotations

import ctypes
import logging
import platform
import struct
import sys

log = logging.getLogger(__name__)

__all__ = ["request_slice"]

_SYS_SCHED_SETATTR = {"x86_64": 314, "aarch64": 274}
_SCHED_OTHER = 0
# size, policy, flags, nice, priority, runtime, deadline, period, util_min, util_max
_SCHED_ATTR = struct.Struct("<IIQiIQQQII")

_libc = None


def request_slice(slice_us: float) -> bool:
    """Ask for a ``slice_us`` scheduler slice for the calling thread (0 restores the default).

    Returns True when the kernel accepted the request.  Kernels that ignore
    the runtime field for normal threads accept it without effect.
    """
    global _libc
    nr = _SYS_SCHED_SETATTR.get(platform.machine())
    if not sys.platform.startswith("linux") or nr is None:
        return False
    try:
        if _libc is None:
            _libc = ctypes.CDLL(None, use_errno=True)
        attr = _SCHED_ATTR.pack(_SCHED_ATTR.size, _SCHED_OTHER, 0, 0, 0,
                                int(slice_us * 1000), 0, 0, 0, 0)
        ok = _libc.syscall(nr, 0, ctypes.create_string_buffer(attr), 0) == 0
    except (OSError, AttributeError):
        return False
    if not ok:
        log.debug("sched_setattr refused: errno %d", ctypes.get_errno())
    return ok
