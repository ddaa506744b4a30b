use std::process::ExitCode;

fn main() -> ExitCode {
    // Behave like a normal pipeline tool when stdout closes early
    // (e.g. `crn recommend ... | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    ExitCode::from(crn_core::cli::run(std::env::args()) as u8)
}
