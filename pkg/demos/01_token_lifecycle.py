#!/usr/bin/env python3
"""Credential lifecycle, end to end.

A client registers once and receives a long-lived refresh token. From it the
client mints short-lived access tokens (1 hour) and sessions (6 hours).
Expiry is exact at the boundary, revocation is permanent, and tokens that
were already minted keep working for their remaining lifetime.

Run with no arguments; everything happens on a logical clock.
"""

import tempfile

from enclave import Enclave, LogicalClock
from enclave.errors import AuthError


def main():
    clock = LogicalClock()
    with tempfile.TemporaryDirectory() as root:
        enclave = Enclave(root, clock=clock, persist_jobs=False)
        enclave.add_role("analyst")

        print("== registration ==")
        refresh = enclave.add_user("alice", {"analyst"})
        print(f"alice registered, refresh token {refresh[:8]}... (never expires)")

        print("\n== access tokens live exactly 3600 seconds ==")
        access = enclave.access_token_for(refresh)
        print(f"minted access token {access[:8]}... at t={clock.now():.0f}")
        clock.advance(3599)
        who = enclave.auth.validate(access)
        print(f"t=3599: still valid, authenticates {who.principal_id}")
        clock.advance(1)
        try:
            enclave.auth.validate(access)
        except AuthError as exc:
            print(f"t=3600: rejected ({exc})")

        print("\n== sessions live 6 hours ==")
        access = enclave.access_token_for(refresh)
        session = enclave.auth.create_session(access)
        print(f"session {session.session_id[:8]}... expires at "
              f"t={session.expires_at:.0f} (now + 21600)")

        print("\n== revocation is permanent, but outstanding tokens survive ==")
        outstanding = enclave.access_token_for(refresh)
        enclave.auth.revoke(refresh)
        enclave.auth.revoke(refresh)    # idempotent
        try:
            enclave.access_token_for(refresh)
        except AuthError as exc:
            print(f"minting after revoke: rejected ({exc})")
        who = enclave.auth.validate(outstanding)
        print(f"access token minted before the revoke still authenticates "
              f"{who.principal_id}")

        enclave.close()


if __name__ == "__main__":
    main()
