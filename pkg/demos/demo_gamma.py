"""
Distance gamma between two small point sets on the line, where the concave cost
makes the optimal matching cross.
"""

from interaction_flows.gamma import gamma_bruteforce, optimal_matching

mu = [[0.0], [1.0]]
nu = [[1.0], [2.0]]

matching = optimal_matching(mu, nu)

print(f"gamma = {matching.distance:.6f}, pairs = {matching.pairs.tolist()}")
print(f"brute force: {gamma_bruteforce(mu, nu):.6f}")
