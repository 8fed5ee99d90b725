from .config import BenchConfig, CategorySpec
from .generator import (FeatureWorld, NoiseLevels, SceneSample, features, generate_dataset, generate_split,
                        make_observation, make_sequence, read_samples, write_samples)
