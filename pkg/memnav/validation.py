import os

import jsonref
import jsonschema
import numpy as np
from pkg_resources import resource_filename

#-- ERRORS
 # checkpoint_container
 # runconfig
 # theta_finite
 # addressing_simplex


def fetch_schema(name, folder_schemas=None):
    if folder_schemas is None:
        schema = resource_filename('memnav', 'schemas/%s' % name)
    else:
        schema = os.path.join(folder_schemas, name)
    abs_path = os.path.abspath(os.path.dirname(schema))
    #-- jsonref resolves the $ref between our schemas relative to this
    base_uri = 'file://{}/'.format(abs_path)
    with open(schema) as fins:
        return jsonref.loads(fins.read(), jsonschema=True, base_uri=base_uri)


def validate_against_schema(j, js):
    isValid = True
    es = []
    #-- lazy validation to catch as many as possible
    myvalidator = jsonschema.Draft4Validator(js, format_checker=jsonschema.FormatChecker())
    for err in sorted(myvalidator.iter_errors(j), key=str):
        isValid = False
        path = '/'.join(str(p) for p in err.absolute_path)
        es.append("%s: %s" % (path, err.message) if path else err.message)
    return (isValid, es)


def checkpoint_container(j):
    return validate_against_schema(j, fetch_schema('checkpoint.schema.json'))


def runconfig(j):
    return validate_against_schema(j, fetch_schema('runconfig.schema.json'))


def theta_finite(theta):
    isValid = True
    es = []
    bad = np.flatnonzero(~np.isfinite(theta))
    if len(bad) > 0:
        isValid = False
        es.append("%d non-finite parameters, first at index %d" % (len(bad), bad[0]))
    return (isValid, es)


def addressing_simplex(state, tol=1e-9):
    """DNC weightings nonnegative with sum <= 1, usage in [0, 1], link rows/cols sum <= 1."""
    isValid = True
    es = []
    checks = [('write weights', state.write_weights[None, :]),
              ('read weights', state.read_weights),
              ('precedence', state.precedence[None, :]),
              ('link rows', state.link),
              ('link columns', state.link.T)]
    for name, w in checks:
        if (w < -tol).any() or (w.sum(axis=1) > 1 + tol).any():
            isValid = False
            es.append("%s leave the simplex" % name)
    if (state.usage < -tol).any() or (state.usage > 1 + tol).any():
        isValid = False
        es.append("usage outside [0, 1]")
    return (isValid, es)
