"""
Check the determinant identities behind the Liouville formula on random matrices
and print the result table.
"""

import pandas as pd

from interaction_flows.determinant import identity_suite

rows = identity_suite(n_pairs=20, seed=0, method='analytic')

print(pd.DataFrame([row.to_dict() for row in rows]).to_string(index=False))
