//! Sandboxed Lua host for user map/combine/hash/reduce scripts.
//!
//! Scripts see only the `table`, `string`, `math` and `utf8` libraries plus
//! a handful of host symbols:
//!
//! * `push(key, value)` stages an output pair; values may be numbers,
//!   strings, lists or objects and are JSON-encoded by the host.
//! * `require "json"` returns the pre-loaded codec with `decode` and
//!   `encode`, callable as `json.decode(s)` or `json:decode(s)`.
//! * `shared_state` holds the job's shared JSON state (e.g. current
//!   k-means centers), or `nil`.
//!
//! There is no `io`, `os`, `debug`, `package`, `dofile`, `loadfile` or
//! `load`, so scripts cannot reach the filesystem, network or clock. Each
//! call into the script runs under an instruction budget.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use mlua::{ChunkMode, Function, HookTriggers, Lua, LuaOptions, LuaSerdeExt, StdLib, Value, Variadic, VmState};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

/// Default per-invocation instruction budget.
pub const DEFAULT_BUDGET: u64 = 50_000_000;
const HOOK_STRIDE: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Mapper,
    Reducer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Mapper => "mapper",
            Role::Reducer => "reducer",
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            Role::Mapper => &["map", "hash"],
            Role::Reducer => &["reduce"],
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "mapper" | "map" => Ok(Role::Mapper),
            "reducer" | "reduce" => Ok(Role::Reducer),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScriptError {
    #[error("script syntax error: {0}")]
    ScriptSyntaxError(String),
    #[error("script lacks required entry point `{0}`")]
    MissingEntryPoint(&'static str),
    #[error("role mismatch: {0}")]
    RoleMismatch(String),
    #[error("script fault: {0}")]
    ScriptFault(String),
    #[error("hash({key:?}, {rcount}) returned {got}, outside [0, {rcount})")]
    HashOutOfRange { key: String, rcount: usize, got: String },
}

/// Pairs produced by `push` during one invocation.
pub type Pushes = Vec<(String, Json)>;

pub struct ScriptHost {
    lua: Lua,
    role: Role,
    budget: u64,
    used: Rc<Cell<u64>>,
    tripped: Rc<Cell<bool>>,
    pushes: Rc<RefCell<Pushes>>,
    has_combine: bool,
}

impl fmt::Debug for ScriptHost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptHost")
            .field("role", &self.role)
            .field("budget", &self.budget)
            .field("has_combine", &self.has_combine)
            .finish_non_exhaustive()
    }
}

fn fault(e: mlua::Error) -> ScriptError {
    ScriptError::ScriptFault(e.to_string())
}

impl ScriptHost {
    /// Creates the sandbox, runs the script's top level under the budget and
    /// resolves the entry points required by `role`.
    pub fn load(
        source: &str,
        role: Role,
        shared_state: Option<&Json>,
        budget: u64,
    ) -> Result<Self, ScriptError> {
        let lua = Lua::new_with(
            StdLib::TABLE | StdLib::STRING | StdLib::MATH | StdLib::UTF8,
            LuaOptions::default(),
        )
        .map_err(fault)?;
        let host = ScriptHost {
            lua,
            role,
            budget,
            used: Rc::new(Cell::new(0)),
            tripped: Rc::new(Cell::new(false)),
            pushes: Rc::new(RefCell::new(Vec::new())),
            has_combine: false,
        };
        host.install_sandbox(shared_state).map_err(fault)?;
        host.install_budget();
        let mut host = host;

        let chunk = host.lua.load(source).set_name("=script").set_mode(ChunkMode::Text);
        let func = chunk.into_function().map_err(|e| match e {
            mlua::Error::SyntaxError { message, .. } => ScriptError::ScriptSyntaxError(message),
            other => ScriptError::ScriptSyntaxError(other.to_string()),
        })?;
        host.guarded(|| func.call::<()>(()))?;
        host.pushes.borrow_mut().clear();

        for name in role.required() {
            if host.entry(name).is_none() {
                return Err(ScriptError::MissingEntryPoint(name));
            }
        }
        host.has_combine = role == Role::Mapper && host.entry("combine").is_some();
        Ok(host)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn has_combine(&self) -> bool {
        self.has_combine
    }

    fn entry(&self, name: &str) -> Option<Function> {
        match self.lua.globals().get::<Value>(name) {
            Ok(Value::Function(f)) => Some(f),
            _ => None,
        }
    }

    fn install_sandbox(&self, shared_state: Option<&Json>) -> mlua::Result<()> {
        let lua = &self.lua;
        let g = lua.globals();
        for name in ["dofile", "loadfile", "load", "loadstring", "require", "collectgarbage"] {
            g.raw_set(name, Value::Nil)?;
        }
        g.raw_set(
            "print",
            lua.create_function(|_, args: Variadic<Value>| {
                let parts: Vec<String> = args.iter().map(|v| format!("{v:?}")).collect();
                log::debug!("script: {}", parts.join("\t"));
                Ok(())
            })?,
        )?;

        let json = lua.create_table()?;
        json.raw_set(
            "decode",
            lua.create_function(|lua, args: Variadic<Value>| {
                let text = match args.last() {
                    Some(Value::String(s)) => s.to_str()?.to_owned(),
                    _ => return Err(mlua::Error::runtime("json.decode expects a string")),
                };
                let v: Json = serde_json::from_str(&text)
                    .map_err(|e| mlua::Error::runtime(format!("json.decode: {e}")))?;
                lua.to_value(&v)
            })?,
        )?;
        json.raw_set(
            "encode",
            lua.create_function(|lua, args: Variadic<Value>| {
                let v = args.last().cloned().unwrap_or(Value::Nil);
                let j = to_json(lua, v)?;
                Ok(j.to_string())
            })?,
        )?;
        json.raw_set("null", lua.null())?;
        let modules = lua.create_table()?;
        modules.raw_set("json", json)?;
        g.raw_set(
            "require",
            lua.create_function(move |_, name: String| match modules.raw_get::<Value>(name.as_str())? {
                Value::Nil => Err(mlua::Error::runtime(format!("module {name:?} is not available in the sandbox"))),
                m => Ok(m),
            })?,
        )?;

        let sink = Rc::clone(&self.pushes);
        g.raw_set(
            "push",
            lua.create_function(move |lua, (key, value): (Value, Value)| {
                let key = match &key {
                    Value::String(s) => s.to_str()?.to_owned(),
                    Value::Integer(i) => i.to_string(),
                    _ => return Err(mlua::Error::runtime("push: key must be a string")),
                };
                if key.is_empty() {
                    return Err(mlua::Error::runtime("push: key must not be empty"));
                }
                let value = to_json(lua, value)?;
                sink.borrow_mut().push((key, value));
                Ok(())
            })?,
        )?;

        match shared_state {
            Some(s) => g.raw_set("shared_state", lua.to_value(s)?)?,
            None => g.raw_set("shared_state", Value::Nil)?,
        }
        Ok(())
    }

    fn install_budget(&self) {
        let used = Rc::clone(&self.used);
        let tripped = Rc::clone(&self.tripped);
        let budget = self.budget;
        self.lua.set_hook(HookTriggers::new().every_nth_instruction(HOOK_STRIDE), move |_, _| {
            let n = used.get() + HOOK_STRIDE as u64;
            used.set(n);
            if n > budget {
                tripped.set(true);
                Err(mlua::Error::runtime("instruction budget exhausted"))
            } else {
                Ok(VmState::Continue)
            }
        });
    }

    /// Runs `f` with a fresh budget and maps Lua errors to script errors.
    fn guarded<R>(&self, f: impl FnOnce() -> mlua::Result<R>) -> Result<R, ScriptError> {
        self.used.set(0);
        self.tripped.set(false);
        let r = f();
        if self.tripped.get() {
            self.pushes.borrow_mut().clear();
            return Err(ScriptError::ScriptFault(format!(
                "instruction budget of {} exhausted",
                self.budget
            )));
        }
        r.map_err(|e| {
            self.pushes.borrow_mut().clear();
            fault(e)
        })
    }

    fn call_entry(&self, name: &'static str, key: &str, value: Value) -> Result<Pushes, ScriptError> {
        let f = self.entry(name).ok_or(ScriptError::MissingEntryPoint(name))?;
        self.guarded(|| f.call::<()>((key, value)))?;
        Ok(std::mem::take(&mut *self.pushes.borrow_mut()))
    }

    fn require_role(&self, role: Role, what: &str) -> Result<(), ScriptError> {
        if self.role == role {
            Ok(())
        } else {
            Err(ScriptError::RoleMismatch(format!("{what} called on a {} script", self.role)))
        }
    }

    /// `map(key, value)`; `value` is handed over as a Lua value.
    pub fn call_map(&self, key: &str, value: &Json) -> Result<Pushes, ScriptError> {
        self.require_role(Role::Mapper, "map")?;
        let v = self.lua.to_value(value).map_err(fault)?;
        self.call_entry("map", key, v)
    }

    /// `combine(key, grouped)`; `grouped` is the JSON text of a list.
    pub fn call_combine(&self, key: &str, grouped: &str) -> Result<Pushes, ScriptError> {
        self.require_role(Role::Mapper, "combine")?;
        let s = self.lua.create_string(grouped).map_err(fault)?;
        self.call_entry("combine", key, Value::String(s))
    }

    /// `reduce(key, grouped)`; `grouped` is the JSON text of a list.
    pub fn call_reduce(&self, key: &str, grouped: &str) -> Result<Pushes, ScriptError> {
        self.require_role(Role::Reducer, "reduce")?;
        let s = self.lua.create_string(grouped).map_err(fault)?;
        self.call_entry("reduce", key, Value::String(s))
    }

    /// `hash(key, rcount)`, which must land in `[0, rcount)`.
    pub fn call_hash(&self, key: &str, rcount: usize) -> Result<usize, ScriptError> {
        self.require_role(Role::Mapper, "hash")?;
        let f = self.entry("hash").ok_or(ScriptError::MissingEntryPoint("hash"))?;
        let v: Value = self.guarded(|| f.call((key, rcount as i64)))?;
        let out_of_range = |got: String| ScriptError::HashOutOfRange { key: key.to_owned(), rcount, got };
        let n = match v {
            Value::Integer(i) => i,
            Value::Number(x) if x.fract() == 0.0 && x.is_finite() => x as i64,
            other => return Err(out_of_range(format!("{other:?}"))),
        };
        if n < 0 || n as u128 >= rcount as u128 {
            return Err(out_of_range(n.to_string()));
        }
        Ok(n as usize)
    }
}

fn to_json(lua: &Lua, v: Value) -> mlua::Result<Json> {
    let opts = mlua::DeserializeOptions::new().sort_keys(true);
    lua.from_value_with(v, opts)
}
