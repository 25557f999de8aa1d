"""Small ETSI GS QKD 014 client used by the relay KME and the harness."""
from __future__ import annotations

import base64
from dataclasses import dataclass

import requests


class KeyDeliveryError(RuntimeError):
    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status
        self.message = message


@dataclass
class DeliveredKey:
    key_id: str
    key: bytes


class KmeClient:
    def __init__(self, base_url: str, *, timeout: float = 150.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = requests.Session()

    def _check(self, resp: requests.Response) -> dict:
        try:
            body = resp.json()
        except ValueError:
            body = {"message": resp.text}
        if resp.status_code != 200:
            raise KeyDeliveryError(resp.status_code, body.get("message", ""))
        return body

    def status(self, slave_sae_id: str) -> dict:
        resp = self.session.get(f"{self.base_url}/api/v1/keys/{slave_sae_id}/status", timeout=self.timeout)
        return self._check(resp)

    def get_key(self, slave_sae_id: str, size: int = 256, number: int = 1) -> DeliveredKey:
        resp = self.session.post(f"{self.base_url}/api/v1/keys/{slave_sae_id}/enc_keys",
                                 json={"number": number, "size": size}, timeout=self.timeout)
        entry = self._check(resp)["keys"][0]
        return DeliveredKey(entry["key_ID"], base64.b64decode(entry["key"]))

    def get_key_with_id(self, master_sae_id: str, key_id: str) -> DeliveredKey:
        resp = self.session.post(f"{self.base_url}/api/v1/keys/{master_sae_id}/dec_keys",
                                 json={"key_IDs": [{"key_ID": key_id}]}, timeout=self.timeout)
        entry = self._check(resp)["keys"][0]
        return DeliveredKey(entry["key_ID"], base64.b64decode(entry["key"]))
