from .config import RunConfig, load_config
from .episode import Episode, SynthSpec, load_episode, save_episode, synthesize_episode, synthetic_suite
from .pipeline import EpisodeResult, quick_infer, run_episode

__all__ = [
    "Episode", "EpisodeResult", "RunConfig", "SynthSpec", "load_config", "load_episode",
    "quick_infer", "run_episode", "save_episode", "synthesize_episode", "synthetic_suite",
]
