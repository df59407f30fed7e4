#pragma once

#include "sftl/cep.hpp"
#include "sftl/data_io.hpp"
#include "sftl/engine.hpp"
#include "sftl/errors.hpp"
#include "sftl/evaluation.hpp"
#include "sftl/linalg.hpp"
#include "sftl/matern.hpp"
#include "sftl/rng.hpp"
#include "sftl/state_space.hpp"
