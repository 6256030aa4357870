'''
Experiment files.

An experiment is a JSON object with the blocks ``model``, ``density``, ``sim`` and
``analysis`` (plus an optional ``name``). Parsing is strict: unknown keys are
violations, and every violation found is reported in a single
ConfigValidationError.

Matrices are nested row-major lists or flat row-major lists of length d^2.
Diffusion matrices are lists of K + 1 such matrices.
'''

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from interaction_flows.density import (
    BumpProduct,
    DensityModel,
    RadialBump,
    UniformBox,
    default_grid_size,
)
from interaction_flows.errors import ConfigurationError, ConfigValidationError
from interaction_flows.integrator import SimConfig, check_stability
from interaction_flows.kernels import (
    FrozenDiffusion,
    LinearKernel,
    MeanRevertingDiffusion,
    ModelSpec,
    SaturatingKernel,
    moment_order_limit,
    zero_diffusion,
)

KERNEL_VARIANTS = ('linear', 'saturating')
DIFFUSION_VARIANTS = ('none', 'mean_reverting', 'frozen')
DENSITY_VARIANTS = ('uniform', 'bump', 'radial_bump')

RECIPES = ('contraction', 'nullmodel', 'linear_noise')

_REQUIRED = object()


@dataclass(frozen=True)
class ModelBlock:
    d: int
    kernel: str
    A: list
    alpha: float | None = None
    beta: float = 0.0
    s: float = 1.0
    diffusion: str = 'none'
    C: list | None = None
    D: list | None = None
    S: list | None = None
    B: float | None = None

    @property
    def K(self) -> int:
        matrices = self.C if self.diffusion == 'mean_reverting' else self.S
        return 0 if matrices is None else len(matrices) - 1


@dataclass(frozen=True)
class DensityBlock:
    variant: str = 'uniform'
    lo: list | None = None
    hi: list | None = None
    center: list | None = None
    radius: float | None = None


@dataclass(frozen=True)
class SimBlock:
    dt: float
    T: float
    N: int
    replicas: int = 1
    seed: int = 0
    save_every: int = 10
    grid: int | None = None
    batch_size: int = 16
    store_particles: bool = True


@dataclass(frozen=True)
class ContractionBlock:
    u: list
    v: list
    p: float = 1.0
    replicas: int | None = None


@dataclass(frozen=True)
class AnalysisBlock:
    p_grid: tuple = (1.5, 2.0, 3.0, 4.0)
    fit_window_fraction: float = 0.5
    eps_mono: float = 1e-3
    probes: tuple = ()
    q: float | None = None
    burn_in: float = 0.0
    contraction: ContractionBlock | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelBlock
    density: DensityBlock
    sim: SimBlock
    analysis: AnalysisBlock
    name: str = 'experiment'
    warnings: tuple = field(default=(), compare=False)

    def to_dict(self) -> dict:
        out = {
            'name': self.name,
            'model': asdict(self.model),
            'density': asdict(self.density),
            'sim': asdict(self.sim),
            'analysis': asdict(self.analysis),
        }
        out['analysis']['p_grid'] = list(self.analysis.p_grid)
        out['analysis']['probes'] = [list(p) for p in self.analysis.probes]
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))

    def with_overrides(self, seed: int | None = None, replicas: int | None = None):
        '''Copy with the seed and/or replica count replaced.'''
        sim = self.sim
        if seed is not None:
            sim = replace(sim, seed=seed)
        if replicas is not None:
            if replicas < 1:
                raise ConfigurationError(f'replicas must be >= 1, got {replicas}')
            sim = replace(sim, replicas=replicas)
        return replace(self, sim=sim)


#
# Strict reader
#


class _Block:
    '''Reads one JSON object, collecting violations instead of raising.'''

    def __init__(self, raw, where: str, violations: list[str], allowed: tuple[str, ...]):
        self.where = where
        self.violations = violations
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            self.fail(where, f'must be an object, got {type(raw).__name__}')
            raw = {}
        self.raw = raw
        for key in raw:
            if key not in allowed:
                self.fail(f'{where}.{key}', 'unknown key')

    def fail(self, path: str, message: str):
        self.violations.append(f'{path}: {message}')

    def path(self, key: str) -> str:
        return f'{self.where}.{key}'

    def has(self, key: str) -> bool:
        return key in self.raw and self.raw[key] is not None

    def number(
        self,
        key: str,
        default=_REQUIRED,
        integer: bool = False,
        minimum: float | None = None,
        positive: bool = False,
    ):
        if not self.has(key):
            if default is _REQUIRED:
                self.fail(self.path(key), 'is required')
            return None if default is _REQUIRED else default
        value = self.raw[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(self.path(key), f'must be a number, got {value!r}')
            return None
        if integer and not float(value).is_integer():
            self.fail(self.path(key), f'must be an integer, got {value!r}')
            return None
        if not math.isfinite(value):
            self.fail(self.path(key), 'must be finite')
            return None
        if positive and not value > 0:
            self.fail(self.path(key), f'must be > 0, got {value}')
            return None
        if minimum is not None and value < minimum:
            self.fail(self.path(key), f'must be >= {minimum}, got {value}')
            return None
        return int(value) if integer else float(value)

    def choice(self, key: str, options: tuple[str, ...], default=_REQUIRED):
        if not self.has(key):
            if default is _REQUIRED:
                self.fail(self.path(key), 'is required')
                return None
            return default
        value = self.raw[key]
        if value not in options:
            self.fail(self.path(key), f'must be one of {list(options)}, got {value!r}')
            return None
        return value

    def boolean(self, key: str, default: bool):
        if not self.has(key):
            return default
        value = self.raw[key]
        if not isinstance(value, bool):
            self.fail(self.path(key), f'must be true or false, got {value!r}')
            return default
        return value

    def vector(self, key: str, d: int | None, default=_REQUIRED):
        if not self.has(key):
            if default is _REQUIRED:
                self.fail(self.path(key), 'is required')
                return None
            return default
        return _vector(self.raw[key], d, self.path(key), self)

    def matrix(self, key: str, d: int | None, default=_REQUIRED):
        if not self.has(key):
            if default is _REQUIRED:
                self.fail(self.path(key), 'is required')
                return None
            return default
        return _matrix(self.raw[key], d, self.path(key), self)

    def matrices(self, key: str, d: int | None, default=_REQUIRED):
        if not self.has(key):
            if default is _REQUIRED:
                self.fail(self.path(key), 'is required')
                return None
            return default
        value = self.raw[key]
        if not isinstance(value, list) or not value:
            self.fail(self.path(key), 'must be a non-empty list of matrices')
            return None
        stack = [_matrix(m, d, f'{self.path(key)}[{k}]', self) for k, m in enumerate(value)]
        return None if any(m is None for m in stack) else stack


def _is_number(value) -> bool:
    return not isinstance(value, bool) and isinstance(value, (int, float)) and math.isfinite(value)


def _vector(value, d, path, block) -> list | None:
    if _is_number(value):
        value = [value]
    if not isinstance(value, list) or not all(_is_number(x) for x in value):
        block.fail(path, f'must be a list of finite numbers, got {value!r}')
        return None
    if d is not None and len(value) != d:
        block.fail(path, f'must have {d} entries, got {len(value)}')
        return None
    return [float(x) for x in value]


def _matrix(value, d, path, block) -> list | None:
    '''A d x d matrix from a nested or a flat row-major list (or a scalar when d = 1).'''
    if d is None:
        return None
    if _is_number(value):
        value = [value]
    if isinstance(value, list) and value and all(isinstance(row, list) for row in value):
        rows = value
        if len(rows) != d or any(len(row) != d for row in rows):
            block.fail(path, f'must be a {d}x{d} matrix')
            return None
        flat = [x for row in rows for x in row]
    elif isinstance(value, list):
        flat = value
        if len(flat) != d * d:
            block.fail(path, f'flat matrix must have {d * d} entries, got {len(flat)}')
            return None
    else:
        block.fail(path, f'must be a matrix, got {value!r}')
        return None
    if not all(_is_number(x) for x in flat):
        block.fail(path, 'entries must be finite numbers')
        return None
    return np.asarray(flat, dtype=np.float64).reshape(d, d).tolist()


#
# Blocks
#


def _model_block(raw, violations) -> ModelBlock | None:
    block = _Block(raw, 'model', violations, ('d', 'kernel', 'diffusion'))
    d = block.number('d', integer=True, minimum=1)

    kernel = _Block(block.raw.get('kernel'), 'model.kernel', violations,
                    ('variant', 'A', 'alpha', 'beta', 's'))
    variant = kernel.choice('variant', KERNEL_VARIANTS, default='linear')
    A = kernel.matrix('A', d, default=None if d is None else np.eye(d).tolist())
    alpha = kernel.number('alpha', default=None, minimum=0.0)
    beta = kernel.number('beta', default=0.0, minimum=0.0)
    s = kernel.number('s', default=1.0, positive=True)
    if variant == 'linear' and (kernel.has('beta') or kernel.has('s')):
        kernel.fail('model.kernel', 'beta and s only apply to the saturating kernel')

    diffusion = _Block(block.raw.get('diffusion'), 'model.diffusion', violations,
                       ('variant', 'C', 'D', 'S', 'B', 'K'))
    noise = diffusion.choice('variant', DIFFUSION_VARIANTS, default='none')
    C = D = S = None
    if noise == 'mean_reverting':
        C = diffusion.matrices('C', d)
        D = diffusion.matrices('D', d, default=None)
    elif noise == 'frozen':
        S = diffusion.matrices('S', d)
        D = diffusion.matrices('D', d, default=None)
    for key in ('C', 'S', 'D'):
        if diffusion.has(key) and (
            noise == 'none'
            or (key == 'C' and noise == 'frozen')
            or (key == 'S' and noise == 'mean_reverting')
        ):
            diffusion.fail(f'model.diffusion.{key}', f'does not apply to diffusion variant {noise!r}')
    B = diffusion.number('B', default=None, minimum=0.0)
    K = diffusion.number('K', default=None, integer=True, minimum=0)
    main = C if noise == 'mean_reverting' else S
    if main is not None and D is not None and len(D) != len(main):
        diffusion.fail('model.diffusion.D', f'must hold {len(main)} matrices, got {len(D)}')
    if K is not None and main is not None and len(main) != K + 1:
        diffusion.fail('model.diffusion.K', f'is {K} but {len(main)} matrices were given')

    if d is None or A is None:
        return None
    return ModelBlock(
        d=d, kernel=variant, A=A, alpha=alpha, beta=beta, s=s,
        diffusion=noise, C=C, D=D, S=S, B=B,
    )


def _density_block(raw, d, violations) -> DensityBlock:
    block = _Block(raw, 'density', violations, ('variant', 'lo', 'hi', 'center', 'radius'))
    variant = block.choice('variant', DENSITY_VARIANTS, default='uniform')
    if variant == 'radial_bump':
        center = block.vector('center', d, default=None if d is None else [0.5] * d)
        radius = block.number('radius', default=0.5, positive=True)
        for key in ('lo', 'hi'):
            if block.has(key):
                block.fail(f'density.{key}', 'does not apply to the radial bump')
        return DensityBlock(variant, center=center, radius=radius)
    lo = block.vector('lo', d, default=None if d is None else [0.0] * d)
    hi = block.vector('hi', d, default=None if d is None else [1.0] * d)
    if lo is not None and hi is not None and any(a >= b for a, b in zip(lo, hi, strict=True)):
        block.fail('density', f'lo must be below hi on every axis, got lo = {lo}, hi = {hi}')
    for key in ('center', 'radius'):
        if block.has(key):
            block.fail(f'density.{key}', f'does not apply to density variant {variant!r}')
    return DensityBlock(variant, lo=lo, hi=hi)


def _sim_block(raw, d, violations) -> SimBlock | None:
    block = _Block(raw, 'sim', violations,
                   ('dt', 'T', 'N', 'replicas', 'seed', 'save_every', 'grid',
                    'batch_size', 'store_particles'))
    values = {
        'dt': block.number('dt', positive=True),
        'T': block.number('T', positive=True),
        'N': block.number('N', integer=True, minimum=1),
        'replicas': block.number('replicas', 1, integer=True, minimum=1),
        'seed': block.number('seed', 0, integer=True, minimum=0),
        'save_every': block.number('save_every', 10, integer=True, minimum=1),
        'grid': block.number('grid', None, integer=True, minimum=0),
        'batch_size': block.number('batch_size', 16, integer=True, minimum=1),
        'store_particles': block.boolean('store_particles', True),
    }
    if d is not None and d >= 4 and values['grid'] != 0:
        block.fail('sim.grid', f'quadrature is limited to d <= 3; set grid to 0 for d = {d}')
    if any(values[key] is None for key in ('dt', 'T', 'N')) or any(
        values[key] is None for key in ('replicas', 'seed', 'save_every', 'batch_size')
    ):
        return None
    sim = SimBlock(**values)
    try:
        build_sim_config(sim)
    except ConfigurationError as exc:
        for message in str(exc).split('; '):
            block.fail('sim', message)
        return None
    return sim


def _analysis_block(raw, d, violations) -> AnalysisBlock:
    block = _Block(raw, 'analysis', violations,
                   ('p_grid', 'fit_window_fraction', 'eps_mono', 'probes', 'q', 'burn_in',
                    'contraction'))
    defaults = AnalysisBlock()
    p_grid = block.vector('p_grid', None, default=list(defaults.p_grid))
    if p_grid is not None:
        if len(p_grid) < 3:
            block.fail('analysis.p_grid', f'needs at least 3 values, got {len(p_grid)}')
        elif p_grid[0] < 1 or any(b <= a for a, b in zip(p_grid, p_grid[1:], strict=False)):
            block.fail('analysis.p_grid', 'must be strictly increasing with every p >= 1')
    fraction = block.number('fit_window_fraction', defaults.fit_window_fraction, positive=True)
    if fraction is not None and fraction >= 1:
        block.fail('analysis.fit_window_fraction', f'must be < 1, got {fraction}')
    eps_mono = block.number('eps_mono', defaults.eps_mono, minimum=0.0)
    q = block.number('q', None, positive=True)
    burn_in = block.number('burn_in', 0.0, minimum=0.0)

    probes = []
    if block.has('probes'):
        raw_probes = block.raw['probes']
        if not isinstance(raw_probes, list):
            block.fail('analysis.probes', 'must be a list of points')
        else:
            for i, point in enumerate(raw_probes):
                vector = _vector(point, d, f'analysis.probes[{i}]', block)
                if vector is not None:
                    probes.append(tuple(vector))

    contraction = None
    if block.has('contraction'):
        inner = _Block(block.raw['contraction'], 'analysis.contraction', violations,
                       ('u', 'v', 'p', 'replicas'))
        u = inner.vector('u', d)
        v = inner.vector('v', d)
        p = inner.number('p', 1.0, minimum=1.0)
        replicas = inner.number('replicas', None, integer=True, minimum=1)
        if u is not None and v is not None and p is not None:
            contraction = ContractionBlock(u, v, p, replicas)

    return AnalysisBlock(
        p_grid=tuple(p_grid or defaults.p_grid),
        fit_window_fraction=fraction or defaults.fit_window_fraction,
        eps_mono=defaults.eps_mono if eps_mono is None else eps_mono,
        probes=tuple(probes),
        q=q,
        burn_in=burn_in or 0.0,
        contraction=contraction,
    )


def parse_config(source) -> ExperimentConfig:
    '''
    Read and validate an experiment.

    Parameters
    ----------
    source : Path, str or dict
        Path to a JSON file, or an already decoded JSON object.

    Returns
    -------
    ExperimentConfig
        The validated configuration with defaults filled in. Soft problems, such as
        a contraction order outside the admissible range, are emitted as warnings
        and kept in ``ExperimentConfig.warnings``.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    ConfigValidationError
        If the experiment violates the schema; lists every violation.
    '''
    where = None
    default_name = 'experiment'
    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source).expanduser()
        where = str(path)
        default_name = path.stem
        if not path.is_file():
            raise FileNotFoundError(f'Experiment file does not exist: {path}')
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigValidationError([f'invalid JSON: {exc}'], where) from exc

    violations: list[str] = []
    top = _Block(raw, 'experiment', violations, ('name', 'model', 'density', 'sim', 'analysis'))
    name = top.raw.get('name', default_name)
    if not isinstance(name, str) or not name or Path(name).name != name:
        top.fail('experiment.name', f'must be a non-empty file name, got {name!r}')
        name = default_name

    model = _model_block(top.raw.get('model'), violations)
    d = model.d if model is not None else None
    density = _density_block(top.raw.get('density'), d, violations)
    sim = _sim_block(top.raw.get('sim'), d, violations)
    analysis = _analysis_block(top.raw.get('analysis'), d, violations)

    # Cross-block checks on the built objects, once the schema itself is clean
    soft = []
    if not violations and model is not None:
        try:
            model_spec = build_model(model)
        except ConfigurationError as exc:
            violations.append(f'model: {exc}')
            model_spec = None
        if model_spec is not None and sim is not None:
            try:
                check_stability(model_spec, sim.dt)
            except ConfigurationError as exc:
                violations.append(f'sim.dt: {exc}')
        if model_spec is not None and analysis.contraction is not None:
            p = analysis.contraction.p
            p_max = moment_order_limit(model_spec.kernel.alpha, model_spec.diffusion.B)
            if model_spec.kernel.alpha <= 0 or p > p_max:
                soft.append(
                    f'contraction order p = {p} is outside the range of the moment '
                    f'contraction lemma (p_max = {p_max})'
                )
    if not violations:
        try:
            build_density(density)
        except ConfigurationError as exc:
            violations.append(f'density: {exc}')

    if violations:
        raise ConfigValidationError(violations, where)
    for message in soft:
        warnings.warn(message, stacklevel=2)
    return ExperimentConfig(model, density, sim, analysis, name, tuple(soft))


def recipe(name: str) -> dict:
    '''Decoded JSON of a bundled recipe.'''
    if name not in RECIPES:
        raise ConfigurationError(f'Unknown recipe {name!r}; bundled recipes: {list(RECIPES)}')
    text = resources.files('interaction_flows').joinpath('recipes', f'{name}.json').read_text()
    return json.loads(text)


def load_experiment(source) -> ExperimentConfig:
    '''
    Parse an experiment given as a file path or as the name of a bundled recipe.

    An existing file wins over a recipe of the same name.
    '''
    if isinstance(source, dict):
        return parse_config(source)
    path = Path(source).expanduser()
    if not path.is_file():
        stem = path.name.removesuffix('.json')
        if stem in RECIPES and path.parent == Path('.'):
            return parse_config(recipe(stem))
    return parse_config(path)


#
# Builders
#


def build_model(block: ModelBlock) -> ModelSpec:
    if block.kernel == 'linear':
        kernel = LinearKernel(block.A, alpha=block.alpha)
    else:
        kernel = SaturatingKernel(block.A, beta=block.beta, s=block.s, alpha=block.alpha)
    if block.diffusion == 'mean_reverting':
        diffusion = MeanRevertingDiffusion(block.C, block.D, B=block.B)
    elif block.diffusion == 'frozen':
        diffusion = FrozenDiffusion(block.S, block.D, B=block.B)
    else:
        diffusion = zero_diffusion(block.d)
        if block.B:
            diffusion = MeanRevertingDiffusion(np.zeros((1, block.d, block.d)), B=block.B)
    return ModelSpec(block.d, kernel, diffusion)


def build_density(block: DensityBlock) -> DensityModel:
    if block.variant == 'uniform':
        return UniformBox(block.lo, block.hi)
    if block.variant == 'bump':
        return BumpProduct(block.lo, block.hi)
    return RadialBump(block.center, block.radius)


def build_sim_config(block: SimBlock) -> SimConfig:
    return SimConfig(
        dt=block.dt,
        T=block.T,
        N=block.N,
        replicas=block.replicas,
        seed=block.seed,
        save_every=block.save_every,
        grid=block.grid,
        batch_size=block.batch_size,
        store_particles=block.store_particles,
    )


def grid_size(config: ExperimentConfig) -> int:
    '''Quadrature nodes per axis actually used by a run.'''
    if config.sim.grid is not None:
        return config.sim.grid
    return default_grid_size(config.model.d)
