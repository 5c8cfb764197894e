#pragma once

#include "odelm/adjoint.hpp"
#include "odelm/autograd.hpp"
#include "odelm/bench.hpp"
#include "odelm/checkpoint.hpp"
#include "odelm/config.hpp"
#include "odelm/corpus.hpp"
#include "odelm/errors.hpp"
#include "odelm/field.hpp"
#include "odelm/grad_check.hpp"
#include "odelm/model.hpp"
#include "odelm/ode.hpp"
#include "odelm/optim.hpp"
#include "odelm/param_store.hpp"
#include "odelm/probes.hpp"
#include "odelm/report_io.hpp"
#include "odelm/tensor.hpp"
#include "odelm/train.hpp"
