import os


class Config:
    SECRET_KEY = os.environ.get('SECRET_KEY', 'dev-key-change-me')

    # Branding
    APP_NAME = os.environ.get('APP_NAME', 'NormQP Tools')
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')

    # Run log (sqlite); empty disables recording
    RUN_LOG_PATH = os.environ.get('RUN_LOG_PATH', '/app/data/runs.db')

    # Solver tolerances and limits
    NORMQP_ARNOLDI_TOL = os.environ.get('NORMQP_ARNOLDI_TOL', '1e-10')
    NORMQP_MAX_RESTARTS = os.environ.get('NORMQP_MAX_RESTARTS', '10')
    NORMQP_DENSE_MAX_DIM = os.environ.get('NORMQP_DENSE_MAX_DIM', '80')
    NORMQP_HARD_CASE_TOL = os.environ.get('NORMQP_HARD_CASE_TOL', '1e-7')
    NORMQP_PGD_STEPS = os.environ.get('NORMQP_PGD_STEPS', '5')
    NORMQP_KKT_TOL = os.environ.get('NORMQP_KKT_TOL', '1e-9')
    # 0 means 100 * (m + n)
    NORMQP_MAX_ITER = os.environ.get('NORMQP_MAX_ITER', '0')
    NORMQP_WORKERS = os.environ.get('NORMQP_WORKERS', '1')
