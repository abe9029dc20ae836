"""Single-task and multi-task models of movie-evoked valence, per viewer and averaged."""

__version__ = "0.1.0"
