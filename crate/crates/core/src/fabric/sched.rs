use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BinaryHeap, VecDeque};
use alloc::rc::Rc;
use core::cell::{Cell, RefCell};
use core::cmp::Ordering;
use core::future::Future;
use core::pin::Pin;
use core::task::{Context, Poll, Waker};

use super::{Tick, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunReport {
    pub now: Tick,
    /// Tasks that had not finished when the run stopped.
    pub blocked_tasks: usize,
    /// True when the run stopped because nothing was left to do.
    pub quiescent: bool,
}

type Action = Box<dyn FnOnce(&Shared)>;

struct Scheduled {
    at: Tick,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

pub(crate) struct SlotState<T> {
    value: Option<T>,
    waiter: Option<TaskId>,
}

impl<T> SlotState<T> {
    pub(crate) fn new_slot() -> Rc<RefCell<SlotState<T>>> {
        Rc::new(RefCell::new(SlotState { value: None, waiter: None }))
    }
}

type Task = Pin<Box<dyn Future<Output = ()>>>;

pub(crate) struct Shared {
    pub(crate) world: RefCell<World>,
    tasks: RefCell<BTreeMap<TaskId, Task>>,
    ready: RefCell<VecDeque<TaskId>>,
    current: Cell<Option<TaskId>>,
    next_task: Cell<u64>,
    queue: RefCell<BinaryHeap<Scheduled>>,
    seq: Cell<u64>,
    now: Cell<Tick>,
}

impl Shared {
    pub(crate) fn new(world: World) -> Shared {
        Shared {
            world: RefCell::new(world),
            tasks: RefCell::new(BTreeMap::new()),
            ready: RefCell::new(VecDeque::new()),
            current: Cell::new(None),
            next_task: Cell::new(0),
            queue: RefCell::new(BinaryHeap::new()),
            seq: Cell::new(0),
            now: Cell::new(0),
        }
    }

    pub(crate) fn now(&self) -> Tick {
        self.now.get()
    }

    pub(crate) fn schedule(&self, at: Tick, action: impl FnOnce(&Shared) + 'static) {
        let seq = self.seq.get();
        self.seq.set(seq + 1);
        self.queue.borrow_mut().push(Scheduled { at: at.max(self.now.get()), seq, action: Box::new(action) });
    }

    pub(crate) fn spawn(&self, fut: Pin<Box<dyn Future<Output = ()>>>) -> TaskId {
        let id = TaskId(self.next_task.get());
        self.next_task.set(id.0 + 1);
        self.tasks.borrow_mut().insert(id, fut);
        self.ready.borrow_mut().push_back(id);
        id
    }

    pub(crate) fn complete<T>(&self, slot: &Rc<RefCell<SlotState<T>>>, v: T) {
        let waiter = {
            let mut s = slot.borrow_mut();
            s.value = Some(v);
            s.waiter.take()
        };
        if let Some(t) = waiter {
            self.ready.borrow_mut().push_back(t);
        }
    }

    fn poll_task(&self, id: TaskId) {
        let Some(mut fut) = self.tasks.borrow_mut().remove(&id) else {
            return;
        };
        self.current.set(Some(id));
        let mut cx = Context::from_waker(Waker::noop());
        let done = fut.as_mut().poll(&mut cx).is_ready();
        self.current.set(None);
        if !done {
            self.tasks.borrow_mut().insert(id, fut);
        }
    }

    fn drain_ready(&self) {
        loop {
            let next = self.ready.borrow_mut().pop_front();
            match next {
                Some(id) => self.poll_task(id),
                None => break,
            }
        }
    }

    pub(crate) fn run_until(&self, limit: Tick) -> RunReport {
        loop {
            self.drain_ready();
            let next = {
                let mut q = self.queue.borrow_mut();
                match q.peek() {
                    Some(s) if s.at <= limit => q.pop(),
                    _ => None,
                }
            };
            match next {
                Some(ev) => {
                    self.now.set(ev.at);
                    (ev.action)(self);
                }
                None => break,
            }
        }
        let quiescent = self.queue.borrow().is_empty();
        RunReport { now: self.now.get(), blocked_tasks: self.tasks.borrow().len(), quiescent }
    }
}

/// Future completed by the simulator. Dropping it early is harmless.
pub struct Pending<T> {
    slot: Rc<RefCell<SlotState<T>>>,
    shared: Rc<Shared>,
}

impl<T> Pending<T> {
    pub(crate) fn new(slot: Rc<RefCell<SlotState<T>>>, shared: Rc<Shared>) -> Self {
        Pending { slot, shared }
    }
}

impl<T> Unpin for Pending<T> {}

impl<T> Future for Pending<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<T> {
        let mut s = self.slot.borrow_mut();
        match s.value.take() {
            Some(v) => Poll::Ready(v),
            None => {
                s.waiter = self.shared.current.get();
                Poll::Pending
            }
        }
    }
}
