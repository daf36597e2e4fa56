"""CLI launcher: ``diffusion-service [--mock] [--port N] [--weights-dir D]``."""

import argparse

import uvicorn

from .app import DEFAULT_WEIGHTS_DIR, create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="diffusion-service",
        description="Serve the guidance wire protocol over HTTP.",
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8400)
    parser.add_argument("--mock", action="store_true",
                        help="run without model weights: echo img2img, "
                             "zero residuals, pseudo-embeddings")
    parser.add_argument("--weights-dir", default=DEFAULT_WEIGHTS_DIR,
                        help="model weights and adapter registry location")
    args = parser.parse_args(argv)

    app = create_app(mock=args.mock, weights_dir=args.weights_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
