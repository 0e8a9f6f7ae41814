#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vulnlens {

/// Base class for every error the library raises. `code()` is a stable
/// machine-readable identifier used in CLI error summaries and HTTP bodies.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

#define VULNLENS_ERROR(Name, Code)                                        \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& message) : Error(Code, message) {} \
    };

VULNLENS_ERROR(ConfigError, "config_error")
VULNLENS_ERROR(IoError, "io_error")
VULNLENS_ERROR(ValidationError, "validation_error")
VULNLENS_ERROR(PreconditionError, "precondition_error")
VULNLENS_ERROR(IntegrityError, "integrity_error")
VULNLENS_ERROR(SamplingError, "sampling_error")
VULNLENS_ERROR(DomainError, "domain_error")
VULNLENS_ERROR(NumericalError, "numerical_error")
VULNLENS_ERROR(ConflictError, "conflict")
VULNLENS_ERROR(NotFoundError, "not_found")
VULNLENS_ERROR(UsageError, "usage_error")
VULNLENS_ERROR(CredentialError, "credential_error")

#undef VULNLENS_ERROR

/// Raised by chat providers. Transient failures (timeouts, 429, 5xx) are
/// retried by the gateway; the rest propagate immediately.
class ProviderError : public Error {
public:
    ProviderError(const std::string& message, bool transient, int status = 0)
        : Error("provider_error", message), transient_(transient), status_(status) {}

    bool transient() const noexcept { return transient_; }
    int status() const noexcept { return status_; }

private:
    bool transient_;
    int status_;
};

}  // namespace vulnlens
