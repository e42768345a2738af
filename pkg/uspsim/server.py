"""
An :py:mod:`flask` based webserver exposing the simulator and cost model as
a small JSON API.
"""

import argparse

import re

from pathlib import Path

from flask import Flask, Blueprint, current_app, jsonify, abort, request

import uspsim

from uspsim.tensor import ShapeError

from uspsim.mesh import MeshInfeasibleError, build_mesh

from uspsim.costmodel import ProfileError

from uspsim.cli import PROFILE_DIR, ConfigError, cmd_cost, cmd_simulate, resolve_config

from uspsim.serdes import read_json


PROFILE_NAME_RE = re.compile(r"[A-Za-z0-9_-]+")


bp = Blueprint("uspsim", __name__)


@bp.errorhandler(ConfigError)
@bp.errorhandler(MeshInfeasibleError)
@bp.errorhandler(ProfileError)
@bp.errorhandler(ShapeError)
def bad_config(exc: Exception):
    return jsonify({"error": str(exc)}), 400


def profile_names(profile_dir: Path) -> list[str]:
    return sorted(
        path.stem
        for path in profile_dir.glob("*.json")
        if PROFILE_NAME_RE.fullmatch(path.stem)
    )


def _request_config(command: str):
    body = request.get_json(silent=True)
    if body is None:
        body = {}
    if not isinstance(body, dict):
        raise ConfigError("Request body must be a JSON object")
    # Reports come back in the response, never written on the server
    if "out" in body or "config" in body:
        raise ConfigError("'out' and 'config' cannot be set over the API")
    config = resolve_config(command, body, {})
    config.validate()
    return config, body


@bp.route('/status')
def get_status():
    return {
        "name": "uspsim",
        "version": uspsim.__version__,
        "profiles": profile_names(current_app.config["profile_dir"]),
    }


@bp.route('/mesh')
def get_mesh():
    """
    The mesh chosen for ``?workers=N&max_ring=R&heads=H``.
    """
    try:
        workers = int(request.args.get("workers", ""))
        max_ring = int(request.args.get("max_ring", "1"))
        heads = int(request.args.get("heads", ""))
    except ValueError:
        raise ConfigError("workers and heads (and optionally max_ring) must be integers")
    return jsonify(build_mesh(workers, max_ring, heads).to_json())


@bp.route('/profiles/<name>')
def get_profile(name):
    profile_dir: Path = current_app.config["profile_dir"]
    if not PROFILE_NAME_RE.fullmatch(name):
        abort(404)
    filename = profile_dir / f"{name}.json"
    if not filename.is_file():
        abort(404)
    return jsonify(read_json(filename))


@bp.route('/simulate', methods=["POST"])
def post_simulate():
    config, _body = _request_config("simulate")
    _status, trace = cmd_simulate(config)
    return jsonify(trace)


@bp.route('/cost', methods=["POST"])
def post_cost():
    config, body = _request_config("cost")
    for name in (config.hw, config.workload):
        if not PROFILE_NAME_RE.fullmatch(name):
            raise ConfigError(f"'{name}' is not a profile name")
    _status, report = cmd_cost(
        config,
        dims_given="dims" in body,
        profile_dir=current_app.config["profile_dir"],
        allow_paths=False,
    )
    return jsonify(report)


def create_app(profile_dir: Path = PROFILE_DIR) -> Flask:
    """
    Create an :py:class:`flask.Flask` application serving the simulator.

    Parameters
    ==========
    profile_dir : Path
        The directory of hardware and workload profile JSON files which
        may be named in requests. Defaults to the packaged profiles.
    """
    if not profile_dir.is_dir():
        raise FileNotFoundError(f"Profile directory {profile_dir} does not exist")

    app = Flask(__name__)
    app.register_blueprint(bp)
    app.config["profile_dir"] = profile_dir.resolve()
    return app


def main():
    parser = argparse.ArgumentParser(
        description="""
            Serve the unified sequence parallel attention simulator and cost
            model as a JSON API.
        """
    )

    parser.add_argument(
        "--profiles",
        type=Path,
        default=PROFILE_DIR,
        help="""
            The directory containing hardware and workload profiles which
            requests may name. Defaults to the packaged profiles.
        """
    )

    parser.add_argument(
        "--host",
        type=str,
        default="127.0.0.1",
        help="""
            The host/IP for the server to listen on. Defaults to %(default)s.
        """
    )

    parser.add_argument(
        "--port",
        type=int,
        default=8000,
        help="""
            The port to listen on. Defaults to %(default)d.
        """
    )

    args = parser.parse_args()

    app = create_app(args.profiles)

    from waitress import serve
    print(f"Serving on: http://{args.host}:{args.port}/")
    serve(app, host=args.host, port=args.port, threads=1)


if __name__ == "__main__":
    main()
