import os

"""
Process-level configuration
===========================

Everything here is read once from the environment at import time. Experiment
configuration (games, learners, seeds, hyper-parameters) lives in JSON config
files handled by harness.py; these constants only pick defaults that depend
on the machine the lab runs on.

Environment Variables:
- SQLOSS_OUTPUT_ROOT: default output root for every CLI verb
- SQLOSS_LOG_LEVEL: root logger level (DEBUG, INFO, ...)
- SQLOSS_WORKERS: process-pool size used to run seeds in parallel
- AZURE_STORAGE_CONNECTION_STRING: blob storage used by `report --publish`
- AzureWebJobsStorage: fallback connection string
- RESULTS_CONTAINER: container receiving published run artifacts
"""

OUTPUT_ROOT = os.environ.get('SQLOSS_OUTPUT_ROOT', 'runs')
LOG_LEVEL = os.environ.get('SQLOSS_LOG_LEVEL', 'INFO')
WORKERS = int(os.environ.get('SQLOSS_WORKERS', '1'))

AZURE_STORAGE_CONNECTION_STRING = os.environ.get('AZURE_STORAGE_CONNECTION_STRING')
AZURE_WEBJOBS_STORAGE = os.environ.get('AzureWebJobsStorage', AZURE_STORAGE_CONNECTION_STRING)
RESULTS_CONTAINER = os.environ.get('RESULTS_CONTAINER', 'sqloss-results')

CODE_VERSION = '1.0.0'
