from .inprocess import CommError, DeliveryError, InProcessNetwork, ReceiveTimeout, snapshot
from .tcp import ConnectionFailed, TcpEndpoint, parse_address
from .wire import (Ack, ConvergenceFlag, CouplingVars, Deregister, FrameDecoder, IncompleteFrame,
                   LengthMismatchError, LocalCopies, Message, MultiplierVals, PlantState, Register, Shutdown,
                   Solution, TriggerStep, TruncatedFrameError, UnknownTagError, WireError, decode, encode)
