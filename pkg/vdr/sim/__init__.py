from vdr.sim.models import SimModels
from vdr.sim.policy import SimPolicy
from vdr.sim.world import (
    SimBackend,
    SimWorld,
    build_world,
    inject_latency,
    sim_visit,
    sim_visual_search,
    sim_web_search,
    text_only_questions,
)

__all__ = [
    'SimBackend',
    'SimModels',
    'SimPolicy',
    'SimWorld',
    'build_world',
    'inject_latency',
    'sim_visit',
    'sim_visual_search',
    'sim_web_search',
    'text_only_questions',
]
