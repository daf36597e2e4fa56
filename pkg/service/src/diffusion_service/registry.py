"""Adapter bookkeeping for personalized concepts.

Each personalization run mints a token (``V*``, then ``V2*``, ``V3*``, ...)
bound to exactly one adapter id. Identical inputs hash to the same adapter,
so repeat runs are idempotent. The registry is a JSON file inside the
weights directory and is reloaded on startup.
"""

import hashlib
import json
import os
import threading

REGISTRY_FILE = "adapters.json"


def _content_hash(image_payloads, category: str, steps: int) -> str:
    h = hashlib.sha256()
    h.update(category.encode("utf-8"))
    h.update(str(int(steps)).encode("ascii"))
    for payload in image_payloads:
        h.update(b"\x00")
        h.update(payload.encode("ascii"))
    return h.hexdigest()[:32]


class AdapterRegistry:
    def __init__(self, weights_dir: str):
        self.weights_dir = weights_dir
        self.path = os.path.join(weights_dir, REGISTRY_FILE)
        self._lock = threading.Lock()
        self._adapters: dict[str, dict] = {}
        self._load()

    def _load(self) -> None:
        if not os.path.exists(self.path):
            return
        with open(self.path) as f:
            self._adapters = json.load(f)

    def _save(self) -> None:
        os.makedirs(self.weights_dir, exist_ok=True)
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self._adapters, f, indent=1, sort_keys=True)
            f.write("\n")
        os.replace(tmp, self.path)

    def _next_token(self) -> str:
        index = len(self._adapters) + 1
        return "V*" if index == 1 else f"V{index}*"

    def register(self, image_payloads, category: str, steps: int) -> dict:
        """Create (or find) the adapter for these inputs; returns its record."""
        adapter_id = _content_hash(image_payloads, category, steps)
        with self._lock:
            if adapter_id in self._adapters:
                return dict(self._adapters[adapter_id])
            record = {
                "adapter_id": adapter_id,
                "token": self._next_token(),
                "category": category,
                "steps": int(steps),
                "n_images": len(image_payloads),
            }
            self._adapters[adapter_id] = record
            self._save()
            return dict(record)

    def match_token(self, prompt: str):
        """The adapter whose token appears in the prompt, if any.

        Longer tokens are checked first so ``V12*`` never matches as ``V*``.
        """
        with self._lock:
            records = sorted(self._adapters.values(),
                             key=lambda r: len(r["token"]), reverse=True)
        for record in records:
            if record["token"] in prompt:
                return dict(record)
        return None

    def list(self) -> list[dict]:
        with self._lock:
            return [
                {"adapter_id": r["adapter_id"], "token": r["token"],
                 "category": r["category"]}
                for r in sorted(self._adapters.values(),
                                key=lambda r: r["token"])
            ]
