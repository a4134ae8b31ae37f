"""Sphinx settings for the memnav API pages."""
import os
import sys

#-- autodoc imports the package from the checkout
sys.path.insert(0, os.path.abspath('..'))

import memnav  # noqa: E402

project = 'memnav'
author = 'the memnav developers'
copyright = '2026, ' + author
release = memnav.__version__
version = '.'.join(release.split('.')[:2])

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.viewcode',
]

master_doc = 'index'
exclude_patterns = ['_build']

autodoc_member_order = 'bysource'
autodoc_default_options = {'members': True, 'show-inheritance': True}

html_theme = 'alabaster'
htmlhelp_basename = 'memnavdoc'
