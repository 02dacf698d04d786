//! Environment forwarding to the sandbox runner. Kept in its own test binary because it
//! mutates process-wide environment variables.

use std::fs;
use std::os::unix::fs::PermissionsExt;

use chartforge::sandbox::{Sandbox, SandboxRequest, ShimSandbox};

#[test]
fn interpreter_override_is_forwarded() {
    let dir = tempfile::tempdir().unwrap();
    let shim = dir.path().join("echo_env.sh");
    let body = "cat > /dev/null\necho \"{\\\"status\\\": \\\"no_figure\\\", \\\"exit_code\\\": 0, \\\"stderr_tail\\\": \\\"$CHARTFORGE_SANDBOX_PY|$CHARTFORGE_LLM_API_KEY\\\", \\\"figure_file\\\": null, \\\"wall_time_ms\\\": 1}\"";
    fs::write(&shim, format!("#!/bin/sh\n{body}\n")).unwrap();
    fs::set_permissions(&shim, fs::Permissions::from_mode(0o755)).unwrap();
    std::env::set_var("CHARTFORGE_SANDBOX_PY", "/opt/python/bin/python3");
    std::env::set_var("CHARTFORGE_LLM_API_KEY", "secret-key");
    let result = ShimSandbox::new(&shim).execute(&SandboxRequest {
            script: "print(1)\n".into(),
            timeout_s: 5,
            workdir: dir.path().join("work"),
        }).unwrap();
    assert_eq!(result.stderr_tail, "/opt/python/bin/python3|");
}
