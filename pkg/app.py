import logging

from flask import Flask
from config import Config


def create_app(test_config=None):
    app = Flask(__name__)
    app.config.from_object(Config)
    if test_config:
        app.config.update(test_config)

    logging.basicConfig(level=app.config.get('LOG_LEVEL', 'INFO'))
    app.logger.setLevel(app.config.get('LOG_LEVEL', 'INFO'))

    from blueprints.solver import solver_bp

    app.register_blueprint(solver_bp)

    # Initialize databases
    from services import run_log
    run_log.configure(app.config.get('RUN_LOG_PATH', ''))
    with app.app_context():
        run_log.init_db()

    return app


if __name__ == '__main__':
    create_app().run(host='0.0.0.0', port=5000, debug=True)
