#pragma once

#include <stdexcept>
#include <string>

namespace intentgate {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// A type invariant was violated at construction or deserialization time.
class InvariantViolation : public Error {
public:
    using Error::Error;
};

class EmptyTurnText : public Error {
public:
    EmptyTurnText() : Error("dialogue turn text must be non-empty") {}
};

class TransportError : public Error {
public:
    using Error::Error;
};

class ApiError : public Error {
public:
    ApiError(int status, std::string body)
        : Error("api error, status " + std::to_string(status)),
          status_(status),
          body_(std::move(body)) {}
    int status() const { return status_; }
    const std::string& body() const { return body_; }

private:
    int status_;
    std::string body_;
};

/// Scripted backend received a call no rule matches.
class ScriptExhausted : public Error {
public:
    using Error::Error;
};

class MissingPlaceholder : public Error {
public:
    using Error::Error;
};

class EmptyRewrite : public Error {
public:
    EmptyRewrite() : Error("tense rewriter returned empty text") {}
};

class EmptyParaphrase : public Error {
public:
    EmptyParaphrase() : Error("paraphraser returned empty text") {}
};

class ChainGenerationError : public Error {
public:
    using Error::Error;
};

class PlanParseError : public Error {
public:
    using Error::Error;
};

class AllStreamsFailed : public Error {
public:
    using Error::Error;
};

class RatingParseError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Structural problem in an input file; carries the 1-based line (or record) number.
class SchemaError : public Error {
public:
    SchemaError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class InsufficientItems : public Error {
public:
    using Error::Error;
};

class EmptyVerdictList : public Error {
public:
    EmptyVerdictList() : Error("verdict list is empty") {}
};

/// Wraps a backend error with the pipeline stage it occurred in.
class PipelineStageError : public Error {
public:
    PipelineStageError(std::string stage, const std::string& what)
        : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

}  // namespace intentgate
