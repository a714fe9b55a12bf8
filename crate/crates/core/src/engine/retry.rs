//! Bounded retry helper used around every backend action.

use std::fmt;

/// All `attempts` invocations of an action failed; carries the final error.
#[derive(Debug)]
pub struct RetryExhausted<E> {
    pub attempts: u32,
    pub last_error: E,
}

impl<E: fmt::Display> fmt::Display for RetryExhausted<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gave up after {} attempts: {}", self.attempts, self.last_error)
    }
}

impl<E: fmt::Display + fmt::Debug> std::error::Error for RetryExhausted<E> {}

/// Runs `action` until it succeeds or `limit` invocations have failed.
///
/// Every failed invocation counts against the limit, whatever the failure
/// mode. On success returns the value and the number of attempts consumed
/// (1 for an immediate success, at most `limit`).
pub fn with_retries<T, E>(
    limit: u32,
    mut action: impl FnMut(u32) -> Result<T, E>,
) -> Result<(T, u32), RetryExhausted<E>> {
    assert!(limit >= 1, "retry limit must be at least 1");
    let mut attempt = 0;
    loop {
        attempt += 1;
        match action(attempt) {
            Ok(value) => return Ok((value, attempt)),
            Err(error) if attempt >= limit => {
                return Err(RetryExhausted { attempts: attempt, last_error: error })
            }
            Err(_) => {}
        }
    }
}
