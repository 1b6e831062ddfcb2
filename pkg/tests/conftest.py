"""Shared fixtures: the synthetic benchmark used by the acceptance suite.

The benchmark is the default ScanRecipe at seed 42 with 50 scans; the
clean subset re-renders the same scenes without occlusion, clutter, or
label corruption (noise stays at 5 mm). Fits are cached per session so
the criteria that share them do not refit.
"""

from dataclasses import replace

import numpy as np
import pytest

import partfit as pf
from partfit.fit import FitConfig, run_variant
from partfit.synth import ScanRecipe, render_scan, sample_scene

BENCHMARK_SEED = 42
BENCHMARK_SIZE = 50


def generate_benchmark(template, recipe, count, seed=BENCHMARK_SEED):
    scans = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        scene = sample_scene(template, recipe, rng)
        scans.append(render_scan(template, scene, recipe, seed=[seed, i]))
    return scans


def clean_recipe(base=None):
    base = base or ScanRecipe()
    return replace(base, occluder_count=0, clutter_points=0, noise_sigma=0.005,
                   uniform_flip=0.0, lr_swap=0.0, clutter_leak=0.0)


@pytest.fixture(scope="session")
def template():
    return pf.builtin_humanoid(3)


@pytest.fixture(scope="session")
def benchmark(template):
    return generate_benchmark(template, ScanRecipe(), BENCHMARK_SIZE)


@pytest.fixture(scope="session")
def clean_benchmark(template):
    return generate_benchmark(template, clean_recipe(), BENCHMARK_SIZE)


@pytest.fixture(scope="session")
def variant4_results(template, benchmark):
    """Variant-4 fits over the full benchmark, shared by criteria 4-6."""
    cfg = FitConfig()
    return [run_variant(cloud, template, cfg, 4) for cloud, _ in benchmark]
