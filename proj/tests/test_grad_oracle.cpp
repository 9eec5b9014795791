#include "doctest.h"
#include "gradcheck.hpp"

using namespace memreg::testing;

// Every differentiable primitive and every loss is checked against
// central finite differences in double precision, over several random
// instances each. Outputs that are not scalars are reduced through a
// fixed random projection so the whole Jacobian is exercised. The
// acceptance gate runs the same suite at 20 instances per case.

TEST_CASE("finite-difference gradient oracle") {
  for (const auto& c : grad_suite()) {
    for (std::uint64_t instance = 0; instance < 3; ++instance) {
      GradCheckResult r = c.run(instance);
      CHECK_MESSAGE(r.failures == 0,
                    c.name << " instance " << instance << ": " << r.failures << "/" << r.checked
                           << " elements off, worst " << r.worst);
      CHECK(r.checked > 0);
    }
  }
}
