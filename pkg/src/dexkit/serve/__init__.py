"""Action inference service: HTTP gateway, policy backends and the rollout client."""
