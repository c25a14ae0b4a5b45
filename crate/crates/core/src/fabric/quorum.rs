use alloc::boxed::Box;
use alloc::vec::Vec;
use core::future::{Future, poll_fn};
use core::pin::Pin;
use core::task::Poll;

use super::{Fabric, Pending, Tick};

pub type BoxFut<T> = Pin<Box<dyn Future<Output = T>>>;

/// One child of a quorum wait, started lazily.
pub struct Launch<T> {
    /// Replica position the child talks to.
    pub idx: usize,
    /// Started immediately; otherwise only once the wait widens.
    pub eager: bool,
    pub start: Box<dyn FnOnce() -> BoxFut<T>>,
}

impl<T> Launch<T> {
    pub fn new(idx: usize, eager: bool, start: impl FnOnce() -> BoxFut<T> + 'static) -> Self {
        Launch { idx, eager, start: Box::new(start) }
    }
}

pub struct Gathered<T> {
    /// Completed children in completion order.
    pub done: Vec<(usize, T)>,
    /// Lazy children had to be started.
    pub widened: bool,
}

/// Waits until `need` children complete.
///
/// Lazy children start right away when the eager ones alone cannot reach
/// `need`, and otherwise once `widen_after` elapses, which marks the result
/// as widened. Children still running at the end keep
/// running as background tasks so their side effects land.
pub async fn gather<T: 'static>(
    fabric: &Fabric,
    launches: Vec<Launch<T>>,
    need: usize,
    widen_after: Tick,
) -> Gathered<T> {
    let mut done: Vec<(usize, T)> = Vec::new();
    if need == 0 {
        // nothing to wait for; eager children still run in the background
        for l in launches.into_iter().filter(|l| l.eager) {
            let f = (l.start)();
            fabric.spawn(async move {
                f.await;
            });
        }
        return Gathered { done, widened: false };
    }
    let (eager, mut lazy): (Vec<_>, Vec<_>) = launches.into_iter().partition(|l| l.eager);
    let mut widened = false;
    let mut running: Vec<Option<(usize, BoxFut<T>)>> = Vec::new();
    for l in eager {
        running.push(Some((l.idx, (l.start)())));
    }
    if running.len() < need {
        for l in lazy.drain(..) {
            running.push(Some((l.idx, (l.start)())));
        }
    }
    let mut timer: Option<Pending<()>> = if lazy.is_empty() { None } else { Some(fabric.sleep(widen_after)) };
    poll_fn(|cx| {
        loop {
            for entry in running.iter_mut() {
                if let Some((idx, f)) = entry
                    && let Poll::Ready(v) = f.as_mut().poll(cx)
                {
                    done.push((*idx, v));
                    *entry = None;
                }
            }
            if done.len() >= need {
                return Poll::Ready(());
            }
            if let Some(t) = timer.as_mut()
                && Pin::new(t).poll(cx).is_ready()
            {
                timer = None;
                widened = true;
                for l in lazy.drain(..) {
                    running.push(Some((l.idx, (l.start)())));
                }
                continue;
            }
            return Poll::Pending;
        }
    })
    .await;
    for (_, f) in running.into_iter().flatten() {
        fabric.spawn(async move {
            f.await;
        });
    }
    Gathered { done, widened }
}

/// Runs both futures concurrently.
pub async fn join2<A, B>(a: impl Future<Output = A>, b: impl Future<Output = B>) -> (A, B) {
    let mut a = core::pin::pin!(a);
    let mut b = core::pin::pin!(b);
    let mut ra = None;
    let mut rb = None;
    poll_fn(|cx| {
        if ra.is_none()
            && let Poll::Ready(v) = a.as_mut().poll(cx)
        {
            ra = Some(v);
        }
        if rb.is_none()
            && let Poll::Ready(v) = b.as_mut().poll(cx)
        {
            rb = Some(v);
        }
        if ra.is_some() && rb.is_some() { Poll::Ready(()) } else { Poll::Pending }
    })
    .await;
    (ra.unwrap(), rb.unwrap())
}

/// Runs all futures concurrently and returns their outputs in input order.
pub async fn join_all<T>(futs: Vec<BoxFut<T>>) -> Vec<T> {
    let mut futs: Vec<Option<BoxFut<T>>> = futs.into_iter().map(Some).collect();
    let mut out: Vec<Option<T>> = futs.iter().map(|_| None).collect();
    poll_fn(|cx| {
        let mut pending = false;
        for (i, slot) in futs.iter_mut().enumerate() {
            if let Some(f) = slot {
                match f.as_mut().poll(cx) {
                    Poll::Ready(v) => {
                        out[i] = Some(v);
                        *slot = None;
                    }
                    Poll::Pending => pending = true,
                }
            }
        }
        if pending { Poll::Pending } else { Poll::Ready(()) }
    })
    .await;
    out.into_iter().map(|v| v.unwrap()).collect()
}

/// Resolves to `None` if `fut` has not finished after `ticks`. The inner
/// future is dropped in that case.
pub async fn with_timeout<T>(fabric: &Fabric, ticks: Tick, fut: impl Future<Output = T>) -> Option<T> {
    let mut fut = core::pin::pin!(fut);
    let mut timer = fabric.sleep(ticks);
    poll_fn(|cx| {
        if let Poll::Ready(v) = fut.as_mut().poll(cx) {
            return Poll::Ready(Some(v));
        }
        if Pin::new(&mut timer).poll(cx).is_ready() {
            return Poll::Ready(None);
        }
        Poll::Pending
    })
    .await
}
