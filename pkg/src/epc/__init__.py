"""Desk-scale multi-agent RL workbench.

Particle-world games with event rewards and distance shaping, a minimal
float32 autodiff stack, a population-invariant attention actor-critic trained
with decentralized actors and centralized critics, an evolutionary population
curriculum that doubles the agent count stage by stage, and cross-play
evaluation with normalized scores.
"""

__version__ = "0.1.0"


def _tune_allocator() -> None:
    # Training allocates and frees many multi-MB scratch arrays per update;
    # with glibc defaults each goes through mmap/munmap and the page faults
    # dominate the arithmetic (about 2x wall time). Raising the thresholds
    # keeps those blocks on the heap for reuse. Best effort, glibc only.
    import ctypes
    import ctypes.util

    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_mmap_threshold, 1 << 30)
        libc.mallopt(m_trim_threshold, 1 << 30)
    except (OSError, AttributeError, TypeError):
        pass


_tune_allocator()
