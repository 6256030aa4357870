"""
Run the deterministic contraction dx = -(x - m) dt from the uniform density on
[0, 1] and print its Lyapunov exponent and moment Lyapunov exponents.
"""

from pathlib import Path

from interaction_flows import experiment
from interaction_flows.config import load_experiment
from interaction_flows.tools import read_json

out_dir = Path('..') / 'out'

config = load_experiment('contraction')
manifest = experiment.run_experiment(config, out_dir, plot=True)

summary = read_json(manifest.outputs["summary_json"]["path"])
print(f"lambda_hat = {summary['lambda_hat']:.6f} (closed form {summary['closed_form_lambda']})")
for p, lambda_p in zip(summary['p'], summary['lambda_p']):
    print(f"  lambda_{p:g} = {lambda_p:.6f}")
print(f"verdict: {summary['verdict']}")
